"""Batch command-line entry point.

Exit status: 0 on success, 1 on a configuration or usage error, 2 when
``recover`` cannot factor the modulus.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import random
import sys

from . import alloc as al
from . import cache as cm
from .orchestrator import SCHEMA, message_for, run_experiment
from .recovery import RecoveryFailed, recover_full_key, recover_q
from .rsa_crt import keygen, sign_crt
from .scenario import PRESET_NOTES, ConfigError, ScenarioConfig, load_config, preset, to_flat

SWEEP_COUNTS = list(range(8, 256, 8)) + list(range(256, 1025, 16))


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _hex(text: str) -> int:
    try:
        return int(text, 16)
    except ValueError:
        raise argparse.ArgumentTypeError(f"malformed hex integer: {text!r}") from None


def _counts(text: str) -> list[int]:
    out = []
    try:
        for part in text.split(","):
            if ":" in part:
                lo, hi, step = (int(x) for x in part.split(":"))
                out.extend(range(lo, hi + 1, step))
            else:
                out.append(int(part))
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad spray count list: {text!r}") from None
    return out


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value scenario file")
    common.add_argument("--preset", choices=["default", "paper-t520"], default="default")
    common.add_argument("--explain-preset", action="store_true",
                        help="print where each preset constant comes from and exit")
    common.add_argument("--seed", type=int)
    common.add_argument("--trials", type=int)
    common.add_argument("--key-bits", type=int)
    common.add_argument("--unit", type=int, choices=[4096, 64])
    common.add_argument("--countermeasure", choices=["on", "off"])
    common.add_argument("--output", choices=["json", "csv"],
                        help="report format; json by default, recover prints key=value lines")
    common.add_argument("--workers", type=int, default=1)

    p = _Parser(prog="memfault", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("attack", parents=[common], help="run end-to-end attack trials")
    sub.add_parser("calibrate", parents=[common], help="measure {A}/{B} probe rounds")
    ap = sub.add_parser("alloc-predict", parents=[common], help="spray-and-free success rates")
    ap.add_argument("--spray-counts", type=_counts, default=SWEEP_COUNTS,
                    help="comma list of counts or lo:hi:step ranges")
    pp = sub.add_parser("prime-probe-demo", parents=[common], help="one probe-loop run")
    pp.add_argument("--touch-at", type=int, help="iteration of the victim access; -1 for none")
    pp.add_argument("--max-iterations", type=int)
    rp = sub.add_parser("recover", parents=[common], help="factor n from s and s'")
    for flag in ("--n", "--e", "--s", "--s-fault"):
        rp.add_argument(flag, type=_hex, required=True)
    sp = sub.add_parser("sign", parents=[common], help="generate a key and sign")
    sp.add_argument("--m", type=_hex)
    sub.add_parser("keygen", parents=[common], help="generate a seeded key")
    return p


def resolve_config(args) -> ScenarioConfig:
    cfg = preset(args.preset)
    if args.config:
        cfg = load_config(args.config, cfg)
    if args.seed is not None:
        cfg = dataclasses.replace(cfg, seed=args.seed)
    if args.key_bits is not None:
        cfg = dataclasses.replace(cfg, key_bits=args.key_bits)
    if args.unit is not None:
        cfg = dataclasses.replace(cfg, unit=args.unit)
    if args.countermeasure is not None:
        cfg = dataclasses.replace(cfg, countermeasure=args.countermeasure == "on")
    cfg.validate()
    return cfg


def _emit(args, cfg, payload: dict, csv_text: str | None = None) -> None:
    if args.output == "csv" and csv_text is not None:
        for k, v in to_flat(cfg).items():
            print(f"# {k} = {v}")
        sys.stdout.write(csv_text)
        return
    body = {"schema": SCHEMA, "command": args.command, "seed": cfg.seed,
            "config": to_flat(cfg)}
    body.update(payload)
    print(json.dumps(body, indent=2))


def _hexes(**vals) -> dict:
    return {k: hex(v) for k, v in vals.items()}


def cmd_attack(args, cfg):
    report = run_experiment(cfg, args.trials or 100, args.workers)
    if args.output == "csv":
        _emit(args, cfg, {}, report.to_csv())
    else:
        sys.stdout.write(report.to_json())


def _probe_setup(cfg):
    cache = cm.CacheState(cfg.cache, random.Random(cfg.seed))
    target = cfg.victim.code_address
    window = (cfg.attacker.window_base, cfg.attacker.window_base + cfg.attacker.window_size)
    return cache, target, cm.find_eviction_set(target, cfg.cache, window)


def cmd_calibrate(args, cfg):
    cache, target, evset = _probe_setup(cfg)
    try:
        cal = cm.calibrate_threshold(cache, evset, target, args.trials or 400)
    except cm.Inseparable as exc:
        print(f"inseparable: {exc}", file=sys.stderr)
        return 1
    import io
    buf = io.StringIO()
    cal.write_csv(buf)
    mean_a, mean_b = cal.means()
    _emit(args, cfg, {"trials": len(cal.a), "low": round(cal.low, 6), "high": round(cal.high, 6),
                      "mean_a": round(mean_a, 6), "mean_b": round(mean_b, 6),
                      "std_a": round(cal.std_a(), 6),
                      "eviction_set": [hex(a) for a in evset]}, buf.getvalue())
    return 0


def cmd_alloc_predict(args, cfg):
    template = al.AllocatorState(cfg.frames, cfg.alloc_base, cfg.interference,
                                 pagemap_readable=cfg.pagemap_readable)
    rows = al.run_prediction_experiment(template, args.spray_counts, args.trials or 100,
                                        cfg.victim, cfg.seed)
    import io
    buf = io.StringIO()
    al.write_prediction_csv(rows, buf)
    _emit(args, cfg, {"rows": [{"spray_count": r.spray_count, "trials": r.trials,
                                "hits": r.hits, "rate": round(r.rate, 6)} for r in rows]},
          buf.getvalue())


def cmd_prime_probe_demo(args, cfg):
    cache, target, evset = _probe_setup(cfg)
    band = cfg.attacker.band
    if band is None:
        band = cm.calibrate_threshold(cache, evset, target, cfg.attacker.calibration_trials).band
    touch = cfg.victim.sign_at if args.touch_at is None else args.touch_at
    feed = {touch: (target,)} if touch >= 0 else {}
    limit = args.max_iterations or cfg.attacker.max_iterations
    result = {"band": list(band), "pause_limit": cfg.attacker.pause_limit,
              "touch_at": touch, "max_iterations": limit}
    try:
        det = cm.prime_probe_wait(cache, evset, band, cfg.attacker.pause_limit, feed, limit)
        result.update(detected=True, iteration=det.iteration,
                      false_positives=det.false_positives)
    except cm.NoDetection as exc:
        result.update(detected=False, iteration=exc.iterations)
    _emit(args, cfg, result)


def cmd_recover(args, cfg):
    print(f"# seed = {cfg.seed}")
    print(f"# n = {hex(args.n)}  e = {hex(args.e)}  s = {hex(args.s)}  s' = {hex(args.s_fault)}")
    try:
        q = recover_q(args.s, args.s_fault, args.n)
        rec = recover_full_key(args.n, args.e, q)
    except (RecoveryFailed, ValueError) as exc:
        if args.output == "json":
            print(json.dumps({"schema": SCHEMA, "recovered": False, "reason": str(exc)}))
        else:
            print(f"recovery_failed: {exc}")
        return 2
    if args.output == "json":
        print(json.dumps({"schema": SCHEMA, "recovered": True,
                          **_hexes(p=rec.p, q=rec.q, d=rec.d)}))
    else:
        print(f"q={rec.q:#x}")
        print(f"p={rec.p:#x}")
        print(f"d={rec.d:#x}")
    return 0


def cmd_keygen(args, cfg):
    key = keygen(cfg.key_bits, random.Random(cfg.seed))
    _emit(args, cfg, {"key": _hexes(n=key.n, e=key.e, d=key.d, p=key.p, q=key.q,
                                    d_p=key.d_p, d_q=key.d_q, q_inv=key.q_inv)})


def cmd_sign(args, cfg):
    key = keygen(cfg.key_bits, random.Random(cfg.seed))
    m = args.m if args.m is not None else message_for(key, b"memfault", cfg.timestamp)
    if not 0 <= m < key.n:
        print("message out of range for the generated modulus", file=sys.stderr)
        return 1
    s = sign_crt(key, m)
    _emit(args, cfg, _hexes(n=key.n, e=key.e, m=m, s=s.s))


def explain_preset(name: str) -> None:
    cfg = preset(name)
    flat = to_flat(cfg)
    for key, note in PRESET_NOTES[name].items():
        value = flat.get(key, "")
        print(f"{key} = {value}".rstrip(" =") + f"    # {note}")


COMMANDS = {
    "attack": cmd_attack,
    "calibrate": cmd_calibrate,
    "alloc-predict": cmd_alloc_predict,
    "prime-probe-demo": cmd_prime_probe_demo,
    "recover": cmd_recover,
    "sign": cmd_sign,
    "keygen": cmd_keygen,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.explain_preset:
        explain_preset(args.preset)
        return 0
    try:
        cfg = resolve_config(args)
    except ConfigError as exc:
        print(f"memfault: config error: {exc}", file=sys.stderr)
        return 1
    return COMMANDS[args.command](args, cfg) or 0


def main_exit() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_exit()
