"""FNV-1a 64-bit hashing.

One primitive serves as blob checksum, patient pseudonym, and derived
identifier generator. Non-cryptographic by design; the grid is a
correctness artifact, not a security product.
"""

FNV64_OFFSET_BASIS = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3

_MASK64 = 0xFFFFFFFFFFFFFFFF


def fnv1a64(data: bytes) -> int:
    """64-bit FNV-1a: state starts at the offset basis; per byte the state
    is XORed with the byte then multiplied by the prime mod 2^64."""
    state = FNV64_OFFSET_BASIS
    prime = FNV64_PRIME
    for byte in data:
        state = ((state ^ byte) * prime) & _MASK64
    return state


def fnv1a64_hex(data: bytes) -> str:
    """fnv1a64 rendered as 16 lowercase hex characters."""
    return f"{fnv1a64(data):016x}"


def hex16(value: int) -> str:
    """Render a 64-bit value as 16 lowercase hex characters."""
    return f"{value & _MASK64:016x}"
