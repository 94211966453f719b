"""RSA key generation and CRT signing.

Messages are raw integers in ``[0, n)``; no padding or hashing is applied.
"""
from __future__ import annotations

import math
import random
from dataclasses import dataclass

DEFAULT_E = 65537

_SMALL_PRIMES = [
    2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47, 53, 59, 61, 67, 71,
    73, 79, 83, 89, 97, 101, 103, 107, 109, 113, 127, 131, 137, 139, 149, 151,
    157, 163, 167, 173, 179, 181, 191, 193, 197, 199, 211, 223, 227, 229, 233,
]
# Fixed witness set: deterministic below 3.3e24, error < 4^-24 above.
_MR_WITNESSES = _SMALL_PRIMES[:24]


class CrashSignal(ArithmeticError):
    """The signer hit an arithmetic error on a corrupted operand."""


@dataclass(frozen=True)
class RsaKey:
    p: int
    q: int
    n: int
    e: int
    d: int
    d_p: int
    d_q: int
    q_inv: int
    k: int

    @property
    def phi(self) -> int:
        return (self.p - 1) * (self.q - 1)


@dataclass(frozen=True)
class Signature:
    s: int
    # simulator bookkeeping; an observer of the signature never sees this
    faulty: bool = False


def is_probable_prime(n: int) -> bool:
    if n < 2:
        return False
    for sp in _SMALL_PRIMES:
        if n == sp:
            return True
        if n % sp == 0:
            return False
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in _MR_WITNESSES:
        x = pow(a, d, n)
        if x == 1 or x == n - 1:
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def random_prime(k: int, rng: random.Random) -> int:
    """A k-bit prime with its two top bits set, so a product of two has 2k bits."""
    while True:
        cand = rng.getrandbits(k) | (3 << (k - 2)) | 1
        if is_probable_prime(cand):
            return cand


def crt_precompute(p: int, q: int, d: int) -> tuple[int, int, int]:
    """Return ``(d_p, d_q, q_inv)`` for the CRT signing path."""
    if p == q:
        raise ValueError("p and q must be distinct")
    q_inv = pow(q, -1, p)
    assert q * q_inv % p == 1
    return d % (p - 1), d % (q - 1), q_inv


def make_key(p: int, q: int, e: int) -> RsaKey:
    phi = (p - 1) * (q - 1)
    d = pow(e, -1, phi)
    d_p, d_q, q_inv = crt_precompute(p, q, d)
    return RsaKey(p=p, q=q, n=p * q, e=e, d=d, d_p=d_p, d_q=d_q, q_inv=q_inv,
                  k=max(p.bit_length(), q.bit_length()))


def _coprime_exponent(e: int, phi: int) -> int:
    if math.gcd(e, phi) == 1:
        return e
    e = 3
    while math.gcd(e, phi) != 1:
        e += 2
    return e


def keygen(k: int, rng: random.Random, e: int = DEFAULT_E) -> RsaKey:
    if k < 8:
        raise ValueError("k must be at least 8 bits")
    p = random_prime(k, rng)
    q = random_prime(k, rng)
    while q == p:
        q = random_prime(k, rng)
    return make_key(p, q, _coprime_exponent(e, (p - 1) * (q - 1)))


def _check_message(m: int, n: int) -> None:
    if not 0 <= m < n:
        raise ValueError(f"message out of range [0, n): {m}")


def garner(s_p: int, s_q: int, q: int, q_inv: int, mod_p: int) -> int:
    """Garner recombination ``s_q + q * (q_inv * (s_p - s_q) mod p)``."""
    h_q = q_inv * (s_p - s_q) % mod_p
    return s_q + h_q * q


def sign_crt(key: RsaKey, m: int, p_override: int | None = None,
             trace: list[int] | None = None) -> Signature:
    """CRT signature of ``m``.

    ``p_override`` stands in for a corrupted in-memory copy of ``p``: it is
    used both as the modulus of the ``s_p`` exponentiation and of the Garner
    step, while ``d_p`` and ``q_inv`` stay at their precomputed values.
    ``trace``, when given, collects the modulus of every exponentiation.
    """
    _check_message(m, key.n)
    p = key.p if p_override is None else p_override
    if p <= 0:
        raise CrashSignal(f"invalid modulus {p}")
    s_q = pow(m, key.d_q, key.q)
    s_p = pow(m, key.d_p, p)
    if trace is not None:
        trace.extend((key.q, p))
    s = garner(s_p, s_q, key.q, key.q_inv, p) % key.n
    faulty = False
    if p != key.p:
        faulty = s != garner(pow(m, key.d_p, key.p), s_q, key.q, key.q_inv, key.p)
    return Signature(s, faulty)


def sign_direct(key: RsaKey, m: int) -> Signature:
    _check_message(m, key.n)
    return Signature(pow(m, key.d, key.n))


def verify(n: int, e: int, m: int, s: int | Signature) -> bool:
    if isinstance(s, Signature):
        s = s.s
    return pow(s, e, n) == m % n
