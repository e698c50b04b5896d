from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

from sympy import isprime

SCHEMES = ("oracle", "ckks")
SECURITY_NOTES = ("production", "test")

# Largest magnitude accepted by encrypt_vector.
VALUE_BOUND = 2.0**10


class FheError(Exception):
    pass


class ParamError(FheError):
    pass


@dataclass(frozen=True)
class FheParams:
    """Leveled approximate-HE context.

    ``chain_bits`` lists prime bit lengths in chain order: the first entry is
    the base prime kept until decryption, the last one is the special prime,
    and everything in between is consumed by rescaling (one per level).
    """

    scheme: str = "ckks"
    ring_dim: int = 2**14
    scale_bits: int = 20
    chain_bits: tuple[int, ...] = (60, 40, 40, 60)
    security: str = "production"

    def __post_init__(self):
        object.__setattr__(self, "chain_bits", tuple(int(b) for b in self.chain_bits))
        if self.scheme not in SCHEMES:
            raise ParamError(f"unknown scheme {self.scheme!r}")
        if self.security not in SECURITY_NOTES:
            raise ParamError(f"unknown security note {self.security!r}")
        n = self.ring_dim
        if n < 8 or n & (n - 1):
            raise ParamError(f"ring_dim must be a power of two >= 8, got {n}")
        if len(self.chain_bits) < 2:
            raise ParamError("modulus chain needs both outer primes")
        if any(not 20 <= b <= 60 for b in self.chain_bits):
            raise ParamError("chain prime sizes must lie in [20, 60] bits")
        if not 1 <= self.scale_bits < self.chain_bits[0]:
            raise ParamError("scale must be smaller than the base prime")

    @property
    def scale(self) -> float:
        return float(2**self.scale_bits)

    @property
    def slot_capacity(self) -> int:
        return self.ring_dim // 2

    @property
    def levels(self) -> int:
        """Number of rescales (plaintext multiplications) a fresh ciphertext allows."""
        return len(self.chain_bits) - 2

    @property
    def data_primes(self) -> tuple[int, ...]:
        return chain_primes(self.ring_dim, self.chain_bits)[:-1]

    @property
    def special_prime(self) -> int:
        return chain_primes(self.ring_dim, self.chain_bits)[-1]

    def with_scheme(self, scheme: str) -> "FheParams":
        return FheParams(scheme, self.ring_dim, self.scale_bits, self.chain_bits, self.security)


def production_profile(scheme: str = "ckks") -> FheParams:
    """n = 2^14, scale 2^20, qi sizes [60, 40, 40, 60]."""
    return FheParams(scheme, 2**14, 20, (60, 40, 40, 60), "production")


def desk_profile(scheme: str = "ckks") -> FheParams:
    """Desk-scale ring with reduced security; scale raised to 2^40 for precision."""
    return FheParams(scheme, 2**12, 40, (60, 40, 40, 60), "test")


@lru_cache(maxsize=None)
def chain_primes(ring_dim: int, chain_bits: tuple[int, ...]) -> tuple[int, ...]:
    """Distinct NTT-friendly primes (q = 1 mod 2n), largest below 2^bits."""
    step = 2 * ring_dim
    used: set[int] = set()
    out = []
    for bits in chain_bits:
        q = ((1 << bits) - 1) // step * step + 1
        while q in used or not isprime(q):
            q -= step
            if q < (1 << (bits - 1)):
                raise ParamError(f"no {bits}-bit prime = 1 mod {step}")
        used.add(q)
        out.append(q)
    return tuple(out)
