"""Parameter sets, the RNS modulus chain and key material.

Chain layout: one wide "anchor" prime q_0 (decryption headroom), then
depth_budget primes sized to the scale (each rescale consumes one), plus a
single wide special prime reserved for key switching.  Ciphertext level ==
index of its last active data prime == multiplications it can still absorb.

Key switching uses per-prime digit decomposition: the switching key for
digit i is an RLWE sample over the full chain plus the special prime whose
message is P * (CRT unit of q_i) * s', so a digit-decomposed product divided
by P lands back on the data chain with only a small additive error.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .encoder import SlotEncoder
from .ntt import PrimeContext, add_mod, find_ntt_primes, neg_mod, reduce_mod

ERROR_STDDEV = 3.2


@dataclass(frozen=True)
class CkksParams:
    poly_degree: int = 2**14
    depth_budget: int = 10
    scale_bits: int = 40
    first_prime_bits: int = 50
    special_prime_bits: int = 50

    def __post_init__(self):
        if self.poly_degree < 8 or self.poly_degree & (self.poly_degree - 1):
            raise ValueError("poly_degree must be a power of two >= 8")
        if self.depth_budget < 1:
            raise ValueError("depth_budget must be >= 1")

    @property
    def slot_count(self) -> int:
        return self.poly_degree // 2

    @property
    def scale(self) -> float:
        return float(2**self.scale_bits)


class ModulusChain:
    """NTT-friendly primes q_0..q_L plus the key-switching special prime."""

    def __init__(self, params: CkksParams):
        n = params.poly_degree
        two_n = 2 * n
        first = find_ntt_primes(params.first_prime_bits, 1, two_n)
        data = find_ntt_primes(params.scale_bits, params.depth_budget, two_n, exclude=first)
        special = find_ntt_primes(
            params.special_prime_bits, 1, two_n, exclude=first + data
        )
        self.data_primes: list[int] = first + data
        self.special_prime: int = special[0]
        self.primes: list[int] = self.data_primes + [self.special_prime]
        self.special_index = len(self.data_primes)

        self.contexts = [PrimeContext(q, n) for q in self.primes]

        # rescale constants: inverse of q_top modulo every earlier prime
        self.inv_qtop = [
            [pow(self.data_primes[top], q - 2, q) for q in self.data_primes[:top]]
            for top in range(len(self.data_primes))
        ]
        # key-switching mod-down constants for the special prime
        p = self.special_prime
        self.inv_special = [pow(p, q - 2, q) for q in self.data_primes]
        self.special_mod_q = [p % q for q in self.data_primes]

    @property
    def max_level(self) -> int:
        return len(self.data_primes) - 1

    def context(self, idx: int) -> PrimeContext:
        return self.contexts[idx]

    @property
    def special_context(self) -> PrimeContext:
        return self.contexts[self.special_index]


@dataclass
class KSwitchKey:
    """Digit-decomposed key-switching key: [digit][chain prime] -> NTT array."""

    k0: list[list[np.ndarray]]
    k1: list[list[np.ndarray]]


@dataclass
class KeySet:
    secret: list[np.ndarray]          # NTT domain, all chain primes
    public: tuple[list[np.ndarray], list[np.ndarray]]  # data primes only
    relin: KSwitchKey
    galois: dict[int, KSwitchKey]     # rotation step -> key
    key_id: bytes

    def evaluation_only(self) -> "KeySet":
        """A copy safe to hand the evaluating party (no secret key)."""
        return KeySet(secret=None, public=self.public, relin=self.relin,
                      galois=self.galois, key_id=self.key_id)


class CkksContext:
    """Shared immutable machinery: chain, NTT tables, encoder, rotations."""

    def __init__(self, params: CkksParams):
        self.params = params
        self.degree = params.poly_degree
        self.slots = params.slot_count
        self.chain = ModulusChain(params)
        self.encoder = SlotEncoder(self.degree)

        # NTT output slot k holds the evaluation at psi**exp[k]; the layout is
        # a property of the butterfly schedule, identical for every prime.
        self._eval_exps = self.chain.contexts[0].evaluation_exponents()
        two_n = 2 * self.degree
        index_of_exp = np.full(two_n, -1, dtype=np.int64)
        index_of_exp[self._eval_exps] = np.arange(self.degree)
        self._index_of_exp = index_of_exp
        self._perm_cache: dict[int, np.ndarray] = {}

    # -- automorphisms ------------------------------------------------------

    def galois_element(self, step: int) -> int:
        return pow(5, step, 2 * self.degree)

    def automorphism_permutation(self, galois_elt: int) -> np.ndarray:
        """NTT-domain index permutation realizing X -> X**galois_elt."""
        perm = self._perm_cache.get(galois_elt)
        if perm is None:
            target = (self._eval_exps * galois_elt) % (2 * self.degree)
            perm = self._index_of_exp[target]
            assert np.all(perm >= 0)
            self._perm_cache[galois_elt] = perm
        return perm

    def apply_automorphism(self, parts: list[np.ndarray], galois_elt: int) -> list[np.ndarray]:
        perm = self.automorphism_permutation(galois_elt)
        return [p[perm] for p in parts]

    # -- sampling -----------------------------------------------------------

    def _sample_ternary_ntt(self, rng, prime_indices) -> list[np.ndarray]:
        coeffs = rng.integers(-1, 2, self.degree, dtype=np.int64)
        return [
            self.chain.context(i).ntt(reduce_mod(coeffs, self.chain.primes[i]))
            for i in prime_indices
        ]

    def _sample_error_ntt(self, rng, prime_indices) -> list[np.ndarray]:
        coeffs = np.rint(rng.normal(0.0, ERROR_STDDEV, self.degree)).astype(np.int64)
        return [
            self.chain.context(i).ntt(reduce_mod(coeffs, self.chain.primes[i]))
            for i in prime_indices
        ]

    def _sample_uniform_ntt(self, rng, prime_indices) -> list[np.ndarray]:
        return [
            rng.integers(0, self.chain.primes[i], self.degree, dtype=np.uint64)
            for i in prime_indices
        ]

    # -- key generation -------------------------------------------------------

    def keygen(self, seed: int, rotation_steps=()) -> KeySet:
        """Deterministic key material; Galois keys for the declared steps."""
        rng = np.random.default_rng(seed)
        chain = self.chain
        all_idx = range(len(chain.primes))
        data_idx = range(len(chain.data_primes))

        secret = self._sample_ternary_ntt(rng, all_idx)

        # public key over the data chain: (b, a) with b = -(a s + e)
        a = self._sample_uniform_ntt(rng, data_idx)
        e = self._sample_error_ntt(rng, data_idx)
        b = []
        for i in data_idx:
            ctx = chain.context(i)
            b.append(neg_mod(add_mod(ctx.mul(a[i], secret[i]), e[i], ctx.q), ctx.q))
        public = (b, a)

        relin_target = [
            chain.context(i).mul(secret[i], secret[i]) for i in all_idx
        ]
        relin = self._kswitch_keygen(rng, secret, relin_target)

        galois = {}
        for step in sorted(set(int(s) for s in rotation_steps)):
            if step == 0:
                continue
            if not 0 < step < self.slots:
                raise ValueError(f"rotation step {step} outside [1, {self.slots})")
            elt = self.galois_element(step)
            rotated_secret = self.apply_automorphism(secret, elt)
            galois[step] = self._kswitch_keygen(rng, secret, rotated_secret)

        digest = hashlib.sha256()
        for arr in public[0] + public[1]:
            digest.update(arr.tobytes())
        return KeySet(secret=secret, public=public, relin=relin,
                      galois=galois, key_id=digest.digest()[:16])

    def _kswitch_keygen(self, rng, secret, target) -> KSwitchKey:
        """Keys switching `target` to `secret`: digit i encrypts P*u_i*target
        where u_i is the CRT unit of data prime q_i."""
        chain = self.chain
        n_data = len(chain.data_primes)
        n_all = len(chain.primes)
        k0: list[list[np.ndarray]] = []
        k1: list[list[np.ndarray]] = []
        for i in range(n_data):
            a = self._sample_uniform_ntt(rng, range(n_all))
            e = self._sample_error_ntt(rng, range(n_all))
            row0 = []
            for j in range(n_all):
                ctx = chain.context(j)
                val = neg_mod(add_mod(ctx.mul(a[j], secret[j]), e[j], ctx.q), ctx.q)
                if j == i:
                    lift = ctx.mul(
                        target[j],
                        np.full(self.degree, chain.special_mod_q[i], dtype=np.uint64),
                    )
                    val = add_mod(val, lift, ctx.q)
                row0.append(val)
            k0.append(row0)
            k1.append(a)
        return KSwitchKey(k0=k0, k1=k1)
