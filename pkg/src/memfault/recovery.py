"""Offline factor recovery from a correct/faulty signature pair."""
from __future__ import annotations

import math
from dataclasses import dataclass

from .rsa_crt import RsaKey, Signature, crt_precompute


class RecoveryFailed(Exception):
    pass


@dataclass(frozen=True)
class RecoveredKey:
    n: int
    e: int
    p: int
    q: int
    d: int
    d_p: int
    d_q: int
    q_inv: int

    def as_rsa_key(self) -> RsaKey:
        return RsaKey(p=self.p, q=self.q, n=self.n, e=self.e, d=self.d,
                      d_p=self.d_p, d_q=self.d_q, q_inv=self.q_inv,
                      k=max(self.p.bit_length(), self.q.bit_length()))


def _value(s: int | Signature) -> int:
    return s.s if isinstance(s, Signature) else s


def recover_q(s: int | Signature, s_fault: int | Signature, n: int) -> int:
    """Common factor of ``s' - s`` and ``n``.

    Raises RecoveryFailed when the pair is identical or the gcd is trivial
    (the fault hit both CRT halves, or neither).
    """
    s, s_fault = _value(s), _value(s_fault)
    if s == s_fault:
        raise RecoveryFailed("signatures are identical; no effective fault")
    g = math.gcd(abs(s_fault - s), n)
    if g == 1 or g == n:
        raise RecoveryFailed(f"trivial gcd {g}")
    return g


def recover_full_key(n: int, e: int, factor: int) -> RecoveredKey:
    if factor <= 1 or factor >= n or n % factor:
        raise ValueError(f"{factor} is not a nontrivial divisor of n")
    q = factor
    p = n // factor
    phi = (p - 1) * (q - 1)
    if math.gcd(e, phi) != 1:
        raise ValueError("e is not invertible mod phi(n)")
    d = pow(e, -1, phi)
    d_p, d_q, q_inv = crt_precompute(p, q, d)
    return RecoveredKey(n=n, e=e, p=p, q=q, d=d, d_p=d_p, d_q=d_q, q_inv=q_inv)
