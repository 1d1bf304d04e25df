"""Deterministic, portable pseudo-random number generator.

The simulator never touches the platform RNG. All randomness comes from
splitmix64, chosen because the whole generator is four lines of integer
arithmetic that any language can reproduce bit-for-bit:

    state := (state + 0x9E3779B97F4A7C15) mod 2^64
    z := state
    z := ((z XOR (z >> 30)) * 0xBF58476D1CE4E5B9) mod 2^64
    z := ((z XOR (z >> 27)) * 0x94D049BB133111EB) mod 2^64
    output := z XOR (z >> 31)

Reference outputs for seed 0: 0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4,
0x06C45D188009454F, 0xF88BB8A8724C81EC, 0x1B39896A51A8749B.
"""

from __future__ import annotations

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15


class SplitMix64:
    """Seedable 64-bit generator with a documented recurrence."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        z = self._state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
        return z ^ (z >> 31)

    def uniform_int(self, lo: int, hi: int) -> int:
        """Integer in [lo, hi], both inclusive. Modulo bias is accepted."""
        if hi < lo:
            raise ValueError(f"empty range [{lo}, {hi}]")
        return lo + self.next_u64() % (hi - lo + 1)

    def unit_float(self) -> float:
        """Float in [0, 1) built from the top 53 bits of one draw."""
        return (self.next_u64() >> 11) * (2.0**-53)

    def bytes(self, n: int) -> bytes:
        """n deterministic bytes, 8 per draw, truncated to length."""
        out = bytearray()
        while len(out) < n:
            out += self.next_u64().to_bytes(8, "big")
        return bytes(out[:n])


def derive_stream_seed(seed: int, tag: int) -> int:
    """Seed for an independent substream, e.g. workload payload bytes."""
    return (seed + (tag + 1) * _GAMMA) & _MASK
