import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from memfault.rsa_crt import (
    CrashSignal, crt_precompute, garner, is_probable_prime, keygen, make_key, random_prime,
    sign_crt, sign_direct, verify,
)


def square_and_multiply(m, d, n):
    # independent of pow(): left-to-right binary exponentiation
    r = 1
    for bit in bin(d)[2:]:
        r = r * r % n
        if bit == "1":
            r = r * m % n
    return r


def brute_inverse(a, mod):
    return next(x for x in range(1, mod) if a * x % mod == 1)


def test_small_example_constants():
    d_p, d_q, q_inv = crt_precompute(11, 13, 103)
    assert (d_p, d_q, q_inv) == (103 % 10, 103 % 12, brute_inverse(13, 11))
    assert (d_p, d_q, q_inv) == (3, 7, 6)


def test_small_example_signature():
    key = make_key(11, 13, 7)
    assert key.n == 143 and key.d == 103
    assert square_and_multiply(2, 103, 143) == 63
    assert sign_crt(key, 2).s == 63
    assert sign_direct(key, 2).s == 63
    assert verify(143, 7, 2, 63)


def test_faulty_recombination_example():
    # s_p stage result corrupted to 5, s_q = 2^7 mod 13 = 11 intact
    assert garner(5, 11, 13, 6, 11) == 115
    assert verify(143, 7, 2, 115) is False


def test_precompute_rejects_equal_primes():
    with pytest.raises(ValueError):
        crt_precompute(11, 11, 7)


@pytest.mark.parametrize("n,expected", [(2, True), (3, True), (4, False), (561, False),
                                        (7919, True), (2**61 - 1, True), (2**61 + 1, False)])
def test_primality(n, expected):
    assert is_probable_prime(n) is expected


def test_random_prime_has_top_bits():
    rng = random.Random(3)
    for k in (8, 16, 32, 64):
        p = random_prime(k, rng)
        assert p.bit_length() == k and p >> (k - 2) == 3 and is_probable_prime(p)


@pytest.mark.parametrize("k", [8, 16, 32, 64])
def test_keygen_shape(k):
    key = keygen(k, random.Random(k))
    assert key.p != key.q
    assert key.n == key.p * key.q
    assert key.e * key.d % key.phi == 1
    assert key.q * key.q_inv % key.p == 1
    assert key.d_p == key.d % (key.p - 1) and key.d_q == key.d % (key.q - 1)


def test_keygen_1024():
    key = keygen(1024, random.Random(1))
    assert key.n.bit_length() == 2048 and key.e == 65537
    m = 0xC0FFEE
    assert sign_crt(key, m).s == sign_direct(key, m).s


def test_keygen_rejects_tiny():
    with pytest.raises(ValueError):
        keygen(4, random.Random(0))


def test_keygen_deterministic():
    assert keygen(32, random.Random(9)) == keygen(32, random.Random(9))


def test_two_exponentiations():
    key = keygen(32, random.Random(2))
    trace = []
    sign_crt(key, 12345, trace=trace)
    assert trace == [key.q, key.p]


def test_message_range():
    key = make_key(11, 13, 7)
    with pytest.raises(ValueError):
        sign_crt(key, 143)
    with pytest.raises(ValueError):
        sign_direct(key, -1)


def test_invalid_override_crashes():
    key = make_key(11, 13, 7)
    with pytest.raises(CrashSignal):
        sign_crt(key, 2, p_override=0)


@given(st.sampled_from([8, 16, 32, 64]), st.integers(0, 2**32), st.integers(0, 2**128))
def test_crt_matches_direct(k, seed, mraw):
    key = keygen(k, random.Random(seed))
    m = mraw % key.n
    s = sign_crt(key, m)
    assert s.s == sign_direct(key, m).s == square_and_multiply(m, key.d, key.n)
    assert verify(key.n, key.e, m, s)
    assert not s.faulty


@given(st.integers(0, 2**32), st.integers(1, 2**31))
def test_overridden_p_keeps_q_residue(seed, mask):
    key = keygen(32, random.Random(seed))
    p_bad = key.p ^ mask
    m = seed % key.n
    s = sign_crt(key, m, p_override=p_bad)
    assert s.s % key.q == pow(m, key.d_q, key.q)
