import json
import subprocess
import sys

import pytest

from memfault.cli import main


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


def test_recover_example(capsys):
    code, out, _ = run(capsys, "recover", "--n", "8f", "--e", "7", "--s", "3f",
                       "--s-fault", "73")
    assert code == 0
    lines = out.splitlines()
    assert lines[0].startswith("# seed = ")
    assert lines[-3:] == ["q=0xd", "p=0xb", "d=0x67"]


def test_recover_accepts_prefix(capsys):
    code, out, _ = run(capsys, "recover", "--n", "0x8f", "--e", "0x7", "--s", "0x3f",
                       "--s-fault", "0x73", "--output", "json")
    assert code == 0
    doc = json.loads(out.splitlines()[-1])
    assert doc == {"schema": 1, "recovered": True, "p": "0xb", "q": "0xd", "d": "0x67"}


def test_recover_failure_exit_code(capsys):
    code, out, _ = run(capsys, "recover", "--n", "8f", "--e", "7", "--s", "3f",
                       "--s-fault", "3f")
    assert code == 2 and "recovery_failed" in out


def test_malformed_hex_is_config_error(capsys):
    code, _, err = run(capsys, "recover", "--n", "zz", "--e", "7", "--s", "3f",
                       "--s-fault", "73")
    assert code == 1 and "malformed hex" in err


def test_bad_config_file(capsys, tmp_path):
    p = tmp_path / "bad.cfg"
    p.write_text("cache.ways = 5\n")
    code, _, err = run(capsys, "attack", "--config", str(p))
    assert code == 1 and "config error" in err


def test_attack_zero_noise(capsys):
    code, out, _ = run(capsys, "attack", "--key-bits", "32", "--trials", "100", "--seed", "7",
                       "--countermeasure", "off", "--config", "configs/zero_noise.cfg")
    doc = json.loads(out)
    assert code == 0
    assert doc["success_rate"] == 1.0 and doc["seed"] == 7
    assert doc["config"]["countermeasure"] == "false"


def test_attack_json_byte_identical(capsys):
    argv = ["attack", "--trials", "20", "--seed", "3", "--config", "configs/calibrated.cfg"]
    assert run(capsys, *argv)[1] == run(capsys, *argv)[1]


def test_attack_csv_has_config_header(capsys):
    code, out, _ = run(capsys, "attack", "--trials", "3", "--output", "csv")
    lines = out.splitlines()
    assert code == 0
    assert "# seed = 0" in lines
    body = [ln for ln in lines if not ln.startswith("#")]
    assert body[0].startswith("trial,seed,outcome") and len(body) == 4


def test_calibrate_csv(capsys):
    code, out, _ = run(capsys, "calibrate", "--trials", "40", "--output", "csv")
    body = [ln for ln in out.splitlines() if not ln.startswith("#")]
    assert code == 0 and body[0].startswith("set_label,trial,way0") and len(body) == 81


def test_calibrate_json(capsys):
    code, out, _ = run(capsys, "calibrate", "--trials", "40")
    doc = json.loads(out)
    assert doc["mean_a"] == 40.0 and doc["mean_b"] == pytest.approx(53.333333)


def test_alloc_predict(capsys):
    code, out, _ = run(capsys, "alloc-predict", "--trials", "5", "--spray-counts", "8,16:32:8")
    doc = json.loads(out)
    assert [r["spray_count"] for r in doc["rows"]] == [8, 16, 24, 32]
    assert doc["rows"][0]["rate"] == 0.0 and doc["rows"][1]["rate"] == 1.0


def test_prime_probe_demo(capsys):
    code, out, _ = run(capsys, "prime-probe-demo", "--touch-at", "3000")
    doc = json.loads(out)
    assert doc["detected"] and 3000 <= doc["iteration"] <= 3002
    code, out, _ = run(capsys, "prime-probe-demo", "--touch-at", "-1", "--max-iterations",
                       "5000")
    assert json.loads(out)["detected"] is False


def test_keygen_and_sign(capsys):
    _, out, _ = run(capsys, "keygen", "--key-bits", "16", "--seed", "4")
    key = json.loads(out)["key"]
    n, e, d = (int(key[k], 16) for k in ("n", "e", "d"))
    _, out, _ = run(capsys, "sign", "--key-bits", "16", "--seed", "4", "--m", "2a")
    doc = json.loads(out)
    assert int(doc["n"], 16) == n
    assert pow(int(doc["s"], 16), e, n) == 0x2A and int(doc["s"], 16) == pow(0x2A, d, n)


def test_explain_preset(capsys):
    code, out, _ = run(capsys, "attack", "--preset", "paper-t520", "--explain-preset")
    assert code == 0 and "attacker.band = 140,180" in out and "pause_limit = 150000" in out


def test_unknown_flag(capsys):
    assert run(capsys, "attack", "--bogus")[0] == 1


def test_module_entry_point():
    r = subprocess.run([sys.executable, "-m", "memfault", "recover", "--n", "8f", "--e", "7",
                        "--s", "3f", "--s-fault", "73"], capture_output=True, text=True)
    assert r.returncode == 0 and "q=0xd" in r.stdout
