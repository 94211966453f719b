import io
import random

import pytest
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes
from hypothesis import given
from hypothesis import strategies as st

from memfault.memcrypt import (
    FRAME_SIZE, DmaPort, EncryptedMemory, EncryptionStateError, OutOfBounds, UnknownProcess,
    XexCipher, decrypt_process_pages, dma_read, dma_write, dump_frames, encrypt_process_pages,
    load_frames,
)
from memfault.orchestrator import Machine, spawn_victim, victim_run
from memfault.recovery import recover_q
from memfault.rsa_crt import keygen, sign_crt
from memfault.scenario import ScenarioConfig

KEY = bytes(range(16))


def aes_block(key, block):
    enc = Cipher(algorithms.AES(key), modes.ECB()).encryptor()
    return enc.update(block) + enc.finalize()


def xor(a, b):
    return bytes(x ^ y for x, y in zip(a, b))


def xex_oracle(key, addr, data):
    out = b""
    for i in range(0, len(data), 16):
        t = aes_block(key, ((addr + i) // 16).to_bytes(16, "little"))
        out += xor(aes_block(key, xor(data[i:i + 16], t)), t)
    return out


def test_aes_known_answer():
    pt = bytes.fromhex("00112233445566778899aabbccddeeff")
    assert aes_block(KEY, pt).hex() == "69c4e0d86a7b0430d8cdb78070b4c55a"


def test_xex_matches_blockwise_oracle():
    rng = random.Random(1)
    data = rng.randbytes(256)
    c = XexCipher(KEY)
    assert c.encrypt(0x7000, data) == xex_oracle(KEY, 0x7000, data)
    assert c.decrypt(0x7000, c.encrypt(0x7000, data)) == data


def test_xex_tweak_depends_on_address():
    c = XexCipher(KEY)
    block = bytes(16)
    assert c.encrypt(0, block) != c.encrypt(16, block)


def test_xex_rejects_misaligned():
    with pytest.raises(ValueError):
        XexCipher(KEY).encrypt(8, bytes(16))


def _mem(unit, pid=5, pfn=3, seed=0):
    rng = random.Random(seed)
    mem = EncryptedMemory(16, unit=unit, key=KEY)
    mem.register(pid, protected=True)
    data = rng.randbytes(FRAME_SIZE)
    mem.map(pfn, pid, writable=True, data=data)
    return mem, data


@pytest.mark.parametrize("unit", [4096, 64])
def test_round_trip(unit):
    mem, data = _mem(unit)
    assert encrypt_process_pages(mem, 5) == 1
    assert mem.load(3 * FRAME_SIZE, FRAME_SIZE) != data
    assert mem.load(3 * FRAME_SIZE, FRAME_SIZE) == xex_oracle(KEY, 3 * FRAME_SIZE, data)
    assert decrypt_process_pages(mem, 5) == 1
    assert mem.load(3 * FRAME_SIZE, FRAME_SIZE) == data


def test_double_operations_rejected():
    mem, _ = _mem(4096)
    with pytest.raises(EncryptionStateError):
        decrypt_process_pages(mem, 5)
    encrypt_process_pages(mem, 5)
    with pytest.raises(EncryptionStateError):
        encrypt_process_pages(mem, 5)


def test_readonly_and_unprotected_pages_stay_plain():
    mem, data = _mem(4096)
    mem.map(4, 5, writable=False, data=data)
    mem.register(6)
    mem.map(7, 6, writable=True, data=data)
    encrypt_process_pages(mem, 5)
    assert mem.load(4 * FRAME_SIZE, FRAME_SIZE) == data
    assert encrypt_process_pages(mem, 6) == 0
    assert mem.load(7 * FRAME_SIZE, FRAME_SIZE) == data


def test_unknown_process():
    with pytest.raises(UnknownProcess):
        encrypt_process_pages(EncryptedMemory(4, key=KEY), 42)


def test_out_of_bounds():
    mem = EncryptedMemory(4, key=KEY)
    with pytest.raises(OutOfBounds):
        mem.load(4 * FRAME_SIZE - 8, 16)
    with pytest.raises(OutOfBounds):
        mem.frame(4)


def hamming(a, b):
    return sum(bin(x ^ y).count("1") for x, y in zip(a, b))


@pytest.mark.parametrize("unit", [4096, 64])
@given(pos=st.integers(0, FRAME_SIZE * 8 - 1), seed=st.integers(0, 2**16))
def test_bit_flip_garbles_exactly_one_block(unit, pos, seed):
    mem, data = _mem(unit, seed=seed)
    encrypt_process_pages(mem, 5)
    byte = 3 * FRAME_SIZE + pos // 8
    dma_write(DmaPort(mem), byte, bytes([mem.load(byte, 1)[0] ^ (1 << pos % 8)]))
    decrypt_process_pages(mem, 5)
    out = mem.load(3 * FRAME_SIZE, FRAME_SIZE)
    blk = pos // 128
    for i in range(0, FRAME_SIZE, 16):
        if i // 16 == blk:
            assert out[i:i + 16] != data[i:i + 16]
        else:
            assert out[i:i + 16] == data[i:i + 16]


def test_dma_sees_ciphertext_and_poll():
    mem, data = _mem(4096)
    port = DmaPort(mem, trigger_address=3 * FRAME_SIZE)
    assert dma_read(port, 3 * FRAME_SIZE, 32) == data[:32]
    assert port.poll(data[:8])
    encrypt_process_pages(mem, 5)
    assert dma_read(port, 3 * FRAME_SIZE, 32) != data[:32]
    assert not port.poll(data[:8])
    assert not DmaPort(mem).poll(b"x")


@pytest.mark.parametrize("unit", [4096, 64])
def test_dump_and_load(unit):
    mem, data = _mem(unit)
    encrypt_process_pages(mem, 5)
    buf = io.BytesIO()
    assert dump_frames(mem, buf) == 1
    assert KEY not in buf.getvalue()
    buf.seek(0)
    back = load_frames(buf, 16, KEY)
    assert back.unit == unit
    decrypt_process_pages(back, 5)
    assert back.load(3 * FRAME_SIZE, FRAME_SIZE) == data


def test_key_not_exposed():
    mem = EncryptedMemory(4, key=KEY)
    for obj in (mem, mem._cipher):
        assert all(v != KEY for v in vars(obj).values())


@pytest.mark.parametrize("width", ["bit", "byte", "block"])
def test_fault_width_irrelevant(width):
    cfg = ScenarioConfig(frames=1 << 12)
    cfg.attacker.window_base, cfg.attacker.window_size = 0x0100000, 0x400000
    for trial in range(20):
        rng = random.Random(trial)
        key = keygen(32, rng)
        mach = Machine(cfg, rng)
        proc = spawn_victim(mach, 2, key)
        m = rng.randrange(key.n)
        addr = proc.p_block

        def fault(mach):
            old = mach.port.read(addr, 16)
            if width == "bit":
                new = bytes([old[0] ^ 0x10]) + old[1:]
            elif width == "byte":
                new = bytes([old[0] ^ 0xFF]) + old[1:]
            else:
                new = bytes(x ^ 0xFF for x in old)
            dma_write(mach.port, addr, new)

        res = victim_run(mach, proc, m, fault)
        assert not res.crashed and res.faulty
        assert recover_q(sign_crt(key, m), res.signature, key.n) == key.q
