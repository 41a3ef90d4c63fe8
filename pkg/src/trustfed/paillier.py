"""Paillier cryptosystem with signed fixed-point encoding.

Additively homomorphic: ciphertexts support addition with each other and
multiplication by plaintext integers. The g = n+1 variant is used, so
g^m mod n^2 = 1 + m*n and encryption needs a single modular exponentiation.

Real-valued inputs are carried as fixed-point integers (``FixedPointCodec``);
negative values occupy the upper half of the ring. When a ciphertext is
produced through the codec path it carries a conservative bound on its signed
plaintext magnitude, and every homomorphic operation checks that the bound
stays below n/2 so decoded results remain exact. Ciphertexts produced without
a bound (raw ring arithmetic) skip those checks.

Not hardened: key sizes down to 16 bits are allowed for simulation work.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass
from functools import cached_property

from .errors import CapacityError, ConfigurationError, EncodingError, FormatError, RangeError
from .util import derive_seed

try:
    from gmpy2 import invert as _gmpy_invert, mpz, powmod as _gmpy_powmod

    def _powmod(base: int, exp: int, mod: int) -> int:
        return int(_gmpy_powmod(mpz(base), mpz(exp), mpz(mod)))

    def _invert(a: int, mod: int) -> int:
        return int(_gmpy_invert(mpz(a), mpz(mod)))

except ImportError:  # pragma: no cover - exercised only without gmpy2
    def _powmod(base: int, exp: int, mod: int) -> int:
        return pow(base, exp, mod)

    def _invert(a: int, mod: int) -> int:
        return pow(a, -1, mod)


MIN_KEY_BITS = 16
MILLER_RABIN_ROUNDS = 40

_SMALL_PRIMES = [2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37, 41, 43, 47]


@dataclass(frozen=True)
class PaillierPublicKey:
    """Public half of a keypair: modulus n and generator g = n+1."""

    n: int
    g: int
    bit_length: int

    @cached_property
    def n_squared(self) -> int:
        return self.n * self.n

    @cached_property
    def half_n(self) -> int:
        return self.n // 2


@dataclass(frozen=True)
class PaillierKeyPair:
    """Full keypair; lam = lcm(p-1, q-1), mu = L(g^lam mod n^2)^-1 mod n."""

    public: PaillierPublicKey
    lam: int
    mu: int

    @property
    def n(self) -> int:
        return self.public.n

    @property
    def g(self) -> int:
        return self.public.g

    @property
    def bit_length(self) -> int:
        return self.public.bit_length


@dataclass(frozen=True)
class PaillierCiphertext:
    """Ciphertext value in [0, n^2) with a fixed-point scale tag.

    ``mag_bound`` conservatively bounds the signed plaintext magnitude
    (as an encoded integer). ``None`` means untracked raw arithmetic.
    """

    value: int
    scale: int = 0
    mag_bound: int | None = None


def _is_probable_prime(candidate: int, rng: random.Random, rounds: int = MILLER_RABIN_ROUNDS) -> bool:
    """Miller-Rabin with witnesses drawn from the provided seed stream."""
    if candidate < 2:
        return False
    for p in _SMALL_PRIMES:
        if candidate == p:
            return True
        if candidate % p == 0:
            return False
    d = candidate - 1
    s = 0
    while d % 2 == 0:
        d //= 2
        s += 1
    for _ in range(rounds):
        a = rng.randrange(2, candidate - 1)
        x = _powmod(a, d, candidate)
        if x == 1 or x == candidate - 1:
            continue
        for _ in range(s - 1):
            x = (x * x) % candidate
            if x == candidate - 1:
                break
        else:
            return False
    return True


def _random_prime(bits: int, rng: random.Random) -> int:
    while True:
        candidate = rng.getrandbits(bits) | (1 << (bits - 1)) | 1
        if _is_probable_prime(candidate, rng):
            return candidate


def keygen(bit_length: int, seed: int) -> PaillierKeyPair:
    """Generate a keypair with an n of roughly ``bit_length`` bits.

    Deterministic for a fixed seed. Key sizes this small are
    simulation-grade, not secure.
    """
    if bit_length < MIN_KEY_BITS or bit_length % 2 != 0:
        raise ConfigurationError(
            f"bit_length must be even and >= {MIN_KEY_BITS}, got {bit_length}"
        )
    rng = random.Random(derive_seed("paillier-keygen", bit_length, seed))
    half = bit_length // 2
    p = _random_prime(half, rng)
    q = _random_prime(half, rng)
    while q == p:
        q = _random_prime(half, rng)
    n = p * q
    g = n + 1
    lam = math.lcm(p - 1, q - 1)
    n_sq = n * n
    mu = _invert(_l_function(_powmod(g, lam, n_sq), n), n)
    public = PaillierPublicKey(n=n, g=g, bit_length=bit_length)
    return PaillierKeyPair(public=public, lam=lam, mu=mu)


def _l_function(u: int, n: int) -> int:
    return (u - 1) // n


def signed_magnitude(m: int, n: int) -> int:
    """Magnitude of m under the signed mapping (upper half of the ring = negative)."""
    return m if m <= n // 2 else n - m


def encrypt(
    pk: PaillierPublicKey,
    m: int,
    rng: random.Random | None = None,
    r: int | None = None,
    track_bound: bool = False,
) -> PaillierCiphertext:
    """Encrypt integer m in [0, n) as g^m * r^n mod n^2.

    ``r`` pins the obfuscation noise (tests); otherwise it is drawn from
    ``rng`` until coprime with n. ``track_bound`` stamps the ciphertext with
    its signed magnitude so downstream operations are capacity-checked.
    """
    n = pk.n
    if not 0 <= m < n:
        raise RangeError(f"plaintext out of range [0, n): {m}")
    if r is None:
        if rng is None:
            raise ConfigurationError("encrypt needs an rng when r is not given")
        while True:
            r = rng.randrange(1, n)
            if math.gcd(r, n) == 1:
                break
    n_sq = pk.n_squared
    value = ((1 + m * n) % n_sq) * _powmod(r, n, n_sq) % n_sq
    bound = signed_magnitude(m, n) if track_bound else None
    return PaillierCiphertext(value=value, scale=0, mag_bound=bound)


def decrypt(kp: PaillierKeyPair, ct: PaillierCiphertext) -> int:
    """Recover the plaintext integer in [0, n)."""
    n = kp.n
    if not 0 <= ct.value < kp.public.n_squared:
        raise RangeError("ciphertext out of range [0, n^2)")
    u = _powmod(ct.value, kp.lam, kp.public.n_squared)
    return _l_function(u, n) * kp.mu % n


def hom_add(pk: PaillierPublicKey, a: PaillierCiphertext, b: PaillierCiphertext) -> PaillierCiphertext:
    """Ciphertext of (m_a + m_b) mod n; requires matching scales."""
    if a.scale != b.scale:
        raise EncodingError(f"scale mismatch: {a.scale} vs {b.scale}")
    bound = None
    if a.mag_bound is not None and b.mag_bound is not None:
        bound = a.mag_bound + b.mag_bound
        if bound >= pk.half_n:
            raise CapacityError(
                "homomorphic add would exceed plaintext capacity; use a larger key"
            )
    value = a.value * b.value % pk.n_squared
    return PaillierCiphertext(value=value, scale=a.scale, mag_bound=bound)


def hom_scalar_mul(
    pk: PaillierPublicKey,
    a: PaillierCiphertext,
    k: int,
    k_scale: int = 0,
) -> PaillierCiphertext:
    """Ciphertext of (k * m) mod n; the scalar's scale is added to the tag."""
    if not 0 <= k < pk.n:
        raise RangeError(f"scalar out of range [0, n): {k}")
    bound = None
    if a.mag_bound is not None:
        bound = a.mag_bound * signed_magnitude(k, pk.n)
        if bound >= pk.half_n:
            raise CapacityError(
                "scalar multiply would exceed plaintext capacity; use a larger key"
            )
    value = _powmod(a.value, k, pk.n_squared)
    return PaillierCiphertext(value=value, scale=a.scale + k_scale, mag_bound=bound)


@dataclass(frozen=True)
class FixedPointCodec:
    """Signed fixed-point mapping between reals and ring integers."""

    n: int
    scale_bits: int = 16

    @property
    def factor(self) -> int:
        return 1 << self.scale_bits

    def encode(self, x: float) -> int:
        """round(x * 2^scale_bits) mod n, negatives as n - |v|."""
        if not math.isfinite(x):
            raise EncodingError(f"cannot encode non-finite value {x}")
        if abs(x) * self.factor >= self.n / 2:
            raise CapacityError(
                f"|{x}| * 2^{self.scale_bits} exceeds the key's signed capacity"
            )
        v = round(x * self.factor)
        return v % self.n

    def decode(self, v: int, scale_exponent: int | None = None) -> float:
        """Invert encode, dividing by the accumulated 2^scale_exponent."""
        if not 0 <= v < self.n:
            raise RangeError(f"encoded value out of range [0, n): {v}")
        exp = self.scale_bits if scale_exponent is None else scale_exponent
        signed = v if v <= self.n // 2 else v - self.n
        return signed / (1 << exp)

    def signed(self, v: int) -> int:
        return v if v <= self.n // 2 else v - self.n


def keypair_to_text(kp: PaillierKeyPair) -> str:
    """Decimal text record, one field per line."""
    lines = [
        f"n {kp.n}",
        f"g {kp.g}",
        f"lambda {kp.lam}",
        f"mu {kp.mu}",
        f"bit-length {kp.bit_length}",
    ]
    return "\n".join(lines) + "\n"


def keypair_from_text(text: str) -> PaillierKeyPair:
    fields: dict[str, int] = {}
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        name, _, value = line.partition(" ")
        fields[name] = int(value)
    try:
        public = PaillierPublicKey(
            n=fields["n"], g=fields["g"], bit_length=fields["bit-length"]
        )
        return PaillierKeyPair(public=public, lam=fields["lambda"], mu=fields["mu"])
    except KeyError as exc:
        raise FormatError(f"key record missing field {exc}") from exc
