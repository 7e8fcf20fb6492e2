"""Elias-gamma codes over ASCII bit strings."""

from .errors import DecodeError, IncompleteCode


def gamma_encode(n: int) -> str:
    if n <= 0:
        raise ValueError(f"Elias gamma needs a positive integer, got {n}")
    body = bin(n)[2:]
    return "0" * (len(body) - 1) + body


def gamma_length(n: int) -> int:
    return 2 * n.bit_length() - 1


def gamma_decode(bits: str, pos: int = 0) -> tuple[int, int]:
    """Read one gamma code starting at ``pos``; return ``(value, next_pos)``."""
    zeros = 0
    while True:
        if pos + zeros >= len(bits):
            raise IncompleteCode("bits ended inside a gamma prefix")
        c = bits[pos + zeros]
        if c == "1":
            break
        if c != "0":
            raise DecodeError(f"not a bit: {c!r}")
        zeros += 1
    end = pos + 2 * zeros + 1
    if end > len(bits):
        raise IncompleteCode("bits ended inside a gamma payload")
    payload = bits[pos + zeros:end]
    if any(c not in "01" for c in payload):
        raise DecodeError("not a bit string")
    return int(payload, 2), end
