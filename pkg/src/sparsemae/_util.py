from decimal import ROUND_HALF_UP, Decimal


def scaled_count(rate: float, n: int) -> int:
    """``round(rate * n)`` with halves rounded up, treating ``rate`` as the
    decimal it prints as (so 0.35 * 5190 = 1816.5 gives 1817)."""
    return int((Decimal(repr(float(rate))) * int(n)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def keep_count(rate: float, n: int) -> int:
    """Tokens kept at retention ``rate``: round-half-up, never below one."""
    return max(1, scaled_count(rate, n))
