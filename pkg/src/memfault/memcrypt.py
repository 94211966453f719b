"""Physical memory with transparent, unauthenticated page encryption.

Writable frames of a protected process are encrypted in place while the
process is descheduled and decrypted when it runs again.  The cipher is
AES-128 in single-key XEX mode, tweaked by the physical address of each
16-byte block::

    T = E_K(block_address)      C = E_K(P ^ T) ^ T

Nothing binds a ciphertext to its contents: a DMA write to ciphertext is
decrypted into pseudo-random plaintext for that one block, and nobody
notices.
"""
from __future__ import annotations

import random
import struct
from dataclasses import dataclass, field
from typing import BinaryIO, Iterable

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms, modes

FRAME_SIZE = 4096
BLOCK_SIZE = 16
UNITS = (4096, 64)

DUMP_MAGIC = b"MFRM"
_HEADER = struct.Struct("<4sHII")  # magic, version, unit, frame count
_RECORD = struct.Struct("<QiB")  # pfn, owner, flags

F_WRITABLE, F_PROTECTED, F_ENCRYPTED = 1, 2, 4


class EncryptionStateError(Exception):
    """Encrypt of an encrypted frame, or decrypt of a plaintext one."""


class UnknownProcess(KeyError):
    pass


class OutOfBounds(IndexError):
    pass


class XexCipher:
    def __init__(self, key: bytes):
        if len(key) != 16:
            raise ValueError("XEX key must be 128 bits")
        self._aes = Cipher(algorithms.AES(key), modes.ECB())

    def _ecb(self, data: bytes, decrypt: bool = False) -> bytes:
        ctx = self._aes.decryptor() if decrypt else self._aes.encryptor()
        return ctx.update(data) + ctx.finalize()

    def tweaks(self, addr: int, nblocks: int) -> np.ndarray:
        idx = np.zeros((nblocks, 2), dtype="<u8")
        idx[:, 0] = np.arange(addr // BLOCK_SIZE, addr // BLOCK_SIZE + nblocks, dtype=np.uint64)
        return np.frombuffer(self._ecb(idx.tobytes()), dtype=np.uint8)

    def _xex(self, addr: int, data: bytes, decrypt: bool) -> bytes:
        if addr % BLOCK_SIZE or len(data) % BLOCK_SIZE:
            raise ValueError("XEX operates on whole, aligned 16-byte blocks")
        t = self.tweaks(addr, len(data) // BLOCK_SIZE)
        x = np.frombuffer(data, dtype=np.uint8) ^ t
        y = np.frombuffer(self._ecb(x.tobytes(), decrypt), dtype=np.uint8) ^ t
        return y.tobytes()

    def encrypt(self, addr: int, data: bytes) -> bytes:
        return self._xex(addr, data, decrypt=False)

    def decrypt(self, addr: int, data: bytes) -> bytes:
        return self._xex(addr, data, decrypt=True)


@dataclass
class Frame:
    data: bytearray = field(default_factory=lambda: bytearray(FRAME_SIZE))
    owner: int = -1
    writable: bool = False
    protected: bool = False
    encrypted: bool = False

    def flags(self) -> int:
        return (F_WRITABLE * self.writable) | (F_PROTECTED * self.protected) | (
            F_ENCRYPTED * self.encrypted)


class EncryptedMemory:
    """Frame-addressed physical memory.  Frames are materialized on first touch."""

    def __init__(self, num_frames: int, unit: int = 4096, key: bytes | None = None,
                 rng: random.Random | None = None):
        if unit not in UNITS:
            raise ValueError(f"unit must be one of {UNITS}")
        if key is None:
            key = (rng or random.Random()).randbytes(16)
        self.num_frames = num_frames
        self.unit = unit
        self.frames: dict[int, Frame] = {}
        self.processes: dict[int, list[int]] = {}
        self.protected: set[int] = set()
        self._cipher = XexCipher(key)

    @property
    def size(self) -> int:
        return self.num_frames * FRAME_SIZE

    def frame(self, pfn: int) -> Frame:
        if not 0 <= pfn < self.num_frames:
            raise OutOfBounds(f"pfn {pfn} outside memory")
        fr = self.frames.get(pfn)
        if fr is None:
            fr = self.frames[pfn] = Frame()
        return fr

    def register(self, pid: int, protected: bool = False) -> None:
        self.processes.setdefault(pid, [])
        if protected:
            self.protect(pid)

    def protect(self, pid: int) -> None:
        self.protected.add(pid)
        for pfn in self.processes.get(pid, []):
            fr = self.frames[pfn]
            fr.protected = fr.writable

    def map(self, pfn: int, owner: int, writable: bool, data: bytes | None = None) -> Frame:
        fr = self.frame(pfn)
        if fr.owner not in (-1, owner):
            self.unmap(pfn)
        fr.owner = owner
        fr.writable = writable
        fr.protected = writable and owner in self.protected
        fr.encrypted = False
        if data is not None:
            if len(data) != FRAME_SIZE:
                raise ValueError("frame data must be exactly one frame")
            fr.data[:] = data
        pages = self.processes.setdefault(owner, [])
        if pfn not in pages:
            pages.append(pfn)
        return fr

    def unmap(self, pfn: int) -> None:
        fr = self.frame(pfn)
        if fr.owner in self.processes:
            self.processes[fr.owner].remove(pfn)
        fr.owner, fr.writable, fr.protected, fr.encrypted = -1, False, False, False

    def frames_of(self, pid: int) -> list[int]:
        if pid not in self.processes:
            raise UnknownProcess(pid)
        return list(self.processes[pid])

    def _check_range(self, addr: int, n: int) -> None:
        if addr < 0 or n < 0 or addr + n > self.size:
            raise OutOfBounds(f"[{addr:#x}, {addr + n:#x}) outside memory")

    def load(self, addr: int, n: int) -> bytes:
        """Raw stored bytes; ciphertext if the frame is currently encrypted."""
        self._check_range(addr, n)
        out = bytearray()
        while n:
            pfn, off = divmod(addr, FRAME_SIZE)
            take = min(n, FRAME_SIZE - off)
            fr = self.frames.get(pfn)
            out += fr.data[off:off + take] if fr else bytes(take)
            addr, n = addr + take, n - take
        return bytes(out)

    def store(self, addr: int, data: bytes) -> None:
        self._check_range(addr, len(data))
        pos = 0
        while pos < len(data):
            pfn, off = divmod(addr + pos, FRAME_SIZE)
            take = min(len(data) - pos, FRAME_SIZE - off)
            self.frame(pfn).data[off:off + take] = data[pos:pos + take]
            pos += take

    def _transform(self, pfn: int, decrypt: bool) -> None:
        fr = self.frames[pfn]
        base = pfn * FRAME_SIZE
        op = self._cipher.decrypt if decrypt else self._cipher.encrypt
        for off in range(0, FRAME_SIZE, self.unit):
            fr.data[off:off + self.unit] = op(base + off, bytes(fr.data[off:off + self.unit]))
        fr.encrypted = not decrypt


def _protected_frames(mem: EncryptedMemory, pid: int) -> list[int]:
    return [pfn for pfn in mem.frames_of(pid) if mem.frames[pfn].protected]


def encrypt_process_pages(mem: EncryptedMemory, pid: int) -> int:
    """Encrypt every protected writable frame of ``pid`` in place."""
    pfns = _protected_frames(mem, pid)
    if any(mem.frames[p].encrypted for p in pfns):
        raise EncryptionStateError(f"pid {pid} already has encrypted frames")
    for pfn in pfns:
        mem._transform(pfn, decrypt=False)
    return len(pfns)


def decrypt_process_pages(mem: EncryptedMemory, pid: int) -> int:
    pfns = _protected_frames(mem, pid)
    if any(not mem.frames[p].encrypted for p in pfns):
        raise EncryptionStateError(f"pid {pid} has frames that are not encrypted")
    for pfn in pfns:
        mem._transform(pfn, decrypt=True)
    return len(pfns)


class DmaPort:
    """Raw physical read/write access, as an external bus-master device sees it."""

    def __init__(self, mem: EncryptedMemory, trigger_address: int | None = None):
        self._mem = mem
        self.trigger_address = trigger_address

    def read(self, addr: int, n: int) -> bytes:
        return self._mem.load(addr, n)

    def write(self, addr: int, data: bytes) -> None:
        # no integrity metadata exists to update
        self._mem.store(addr, data)

    def poll(self, pattern: bytes) -> bool:
        if self.trigger_address is None:
            return False
        return self.read(self.trigger_address, len(pattern)) == pattern


def dma_read(port: DmaPort, phys_addr: int, n: int) -> bytes:
    return port.read(phys_addr, n)


def dma_write(port: DmaPort, phys_addr: int, data: bytes) -> None:
    port.write(phys_addr, data)


def dump_frames(mem: EncryptedMemory, fp: BinaryIO, pfns: Iterable[int] | None = None) -> int:
    """Write frame images (never the key) and return the number of frames written."""
    pfns = sorted(mem.frames) if pfns is None else list(pfns)
    fp.write(_HEADER.pack(DUMP_MAGIC, 1, mem.unit, len(pfns)))
    for pfn in pfns:
        fr = mem.frame(pfn)
        fp.write(_RECORD.pack(pfn, fr.owner, fr.flags()))
        fp.write(fr.data)
    return len(pfns)


def load_frames(fp: BinaryIO, num_frames: int, key: bytes) -> EncryptedMemory:
    magic, version, unit, count = _HEADER.unpack(fp.read(_HEADER.size))
    if magic != DUMP_MAGIC or version != 1:
        raise ValueError("not a frame dump")
    mem = EncryptedMemory(num_frames, unit=unit, key=key)
    for _ in range(count):
        pfn, owner, flags = _RECORD.unpack(fp.read(_RECORD.size))
        data = fp.read(FRAME_SIZE)
        if len(data) != FRAME_SIZE:
            raise ValueError("truncated frame dump")
        fr = mem.frame(pfn)
        fr.data[:] = data
        fr.owner = owner
        fr.writable = bool(flags & F_WRITABLE)
        fr.protected = bool(flags & F_PROTECTED)
        fr.encrypted = bool(flags & F_ENCRYPTED)
        if owner != -1:
            mem.processes.setdefault(owner, []).append(pfn)
            if fr.protected:
                mem.protected.add(owner)
    return mem
