import hashlib


def derive_seed(*parts) -> int:
    """Stable 64-bit seed from any tuple of printable parts."""
    text = "/".join(str(p) for p in parts).encode()
    return int.from_bytes(hashlib.sha256(text).digest()[:8], "little")
