"""Ciphertext/plaintext types and the leveled homomorphic operations.

Everything is stored in the NTT (evaluation) domain; the only transforms
back to coefficient space happen inside rescale, key switching and
decryption.  Scales are tracked as exact floats; additions tolerate the tiny
relative drift that the near-scale primes introduce (bounded well below
2**-10 per level by prime selection).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import AlignmentError, DepthBudgetError, KeyMismatchError, RotationKeyError
from .context import CkksContext, KeySet, KSwitchKey
from .ntt import add_mod, neg_mod, reduce_mod, sub_mod

SCALE_RTOL = 2.0**-10


@dataclass
class Plaintext:
    parts: list[np.ndarray]  # NTT domain, data primes 0..level
    level: int
    scale: float


@dataclass
class Ciphertext:
    c0: list[np.ndarray]
    c1: list[np.ndarray]
    level: int
    scale: float
    key_id: bytes

    def copy(self) -> "Ciphertext":
        return Ciphertext([p.copy() for p in self.c0], [p.copy() for p in self.c1],
                          self.level, self.scale, self.key_id)


def _check_scales(a_scale: float, b_scale: float, op: str) -> None:
    if abs(a_scale - b_scale) > SCALE_RTOL * max(a_scale, b_scale):
        raise AlignmentError(
            f"{op}: scale mismatch ({a_scale:.6g} vs {b_scale:.6g})"
        )


def _check_levels(a_level: int, b_level: int, op: str) -> None:
    if a_level != b_level:
        raise AlignmentError(f"{op}: level mismatch ({a_level} vs {b_level})")


class CkksEvaluator:
    """Pure-function homomorphic operations bound to one context + key set."""

    def __init__(self, context: CkksContext, keys: KeySet):
        self.ctx = context
        self.keys = keys

    # -- encode / encrypt / decrypt ----------------------------------------

    def encode(self, slots: np.ndarray, scale: float, level: int, limit: float = None) -> Plaintext:
        if limit is None:
            coeffs = self.ctx.encoder.encode_integers(slots, scale)
        else:
            coeffs = self.ctx.encoder.encode_integers(slots, scale, limit=limit)
        chain = self.ctx.chain
        parts = [
            chain.context(j).ntt(reduce_mod(coeffs, chain.primes[j]))
            for j in range(level + 1)
        ]
        return Plaintext(parts=parts, level=level, scale=scale)

    def decode(self, pt: Plaintext) -> np.ndarray:
        coeffs = self._to_centered_coeffs(pt.parts)
        return self.ctx.encoder.project(coeffs / pt.scale)

    def encrypt(self, pt: Plaintext, rng: np.random.Generator) -> Ciphertext:
        chain = self.ctx.chain
        if pt.level != chain.max_level:
            raise AlignmentError("fresh encryptions must be at the top level")
        pk0, pk1 = self.keys.public
        u = self.ctx._sample_ternary_ntt(rng, range(pt.level + 1))
        e0 = self.ctx._sample_error_ntt(rng, range(pt.level + 1))
        e1 = self.ctx._sample_error_ntt(rng, range(pt.level + 1))
        c0, c1 = [], []
        for j in range(pt.level + 1):
            ctx = chain.context(j)
            c0.append(add_mod(add_mod(ctx.mul(pk0[j], u[j]), e0[j], ctx.q), pt.parts[j], ctx.q))
            c1.append(add_mod(ctx.mul(pk1[j], u[j]), e1[j], ctx.q))
        return Ciphertext(c0, c1, pt.level, pt.scale, self.keys.key_id)

    def decrypt(self, ct: Ciphertext) -> Plaintext:
        if self.keys.secret is None:
            raise KeyMismatchError("this key set holds no secret key")
        if ct.key_id != self.keys.key_id:
            raise KeyMismatchError("ciphertext was produced under a different key set")
        chain = self.ctx.chain
        parts = []
        for j in range(ct.level + 1):
            ctx = chain.context(j)
            parts.append(add_mod(ct.c0[j], ctx.mul(ct.c1[j], self.keys.secret[j]), ctx.q))
        return Plaintext(parts=parts, level=ct.level, scale=ct.scale)

    def decrypt_decode(self, ct: Ciphertext) -> np.ndarray:
        return self.decode(self.decrypt(ct))

    def _to_centered_coeffs(self, parts: list[np.ndarray]) -> np.ndarray:
        """CRT-reconstruct NTT-domain residues to centered float coefficients."""
        chain = self.ctx.chain
        residues = [chain.context(j).intt(p) for j, p in enumerate(parts)]
        primes = [chain.primes[j] for j in range(len(parts))]
        if len(parts) == 1:
            q = primes[0]
            r = residues[0].astype(np.int64)
            return np.where(r > q // 2, r - q, r).astype(np.float64)
        modulus = 1
        for q in primes:
            modulus *= q
        acc = np.zeros(self.ctx.degree, dtype=object)
        for r, q in zip(residues, primes):
            m_q = modulus // q
            weight = m_q * pow(m_q, q - 2, q)
            acc += r.astype(object) * weight
        acc %= modulus
        acc = acc - (acc > modulus // 2).astype(object) * modulus
        return acc.astype(np.float64)

    # -- arithmetic ----------------------------------------------------------

    def add(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        _check_levels(a.level, b.level, "add")
        _check_scales(a.scale, b.scale, "add")
        chain = self.ctx.chain
        c0 = [add_mod(x, y, chain.primes[j]) for j, (x, y) in enumerate(zip(a.c0, b.c0))]
        c1 = [add_mod(x, y, chain.primes[j]) for j, (x, y) in enumerate(zip(a.c1, b.c1))]
        return Ciphertext(c0, c1, a.level, a.scale, a.key_id)

    def add_plain(self, a: Ciphertext, pt: Plaintext) -> Ciphertext:
        _check_levels(a.level, pt.level, "add_plain")
        _check_scales(a.scale, pt.scale, "add_plain")
        chain = self.ctx.chain
        c0 = [add_mod(x, p, chain.primes[j]) for j, (x, p) in enumerate(zip(a.c0, pt.parts))]
        return Ciphertext(c0, [p.copy() for p in a.c1], a.level, a.scale, a.key_id)

    def negate(self, a: Ciphertext) -> Ciphertext:
        chain = self.ctx.chain
        c0 = [neg_mod(x, chain.primes[j]) for j, x in enumerate(a.c0)]
        c1 = [neg_mod(x, chain.primes[j]) for j, x in enumerate(a.c1)]
        return Ciphertext(c0, c1, a.level, a.scale, a.key_id)

    def mul_plain(self, a: Ciphertext, pt: Plaintext) -> Ciphertext:
        _check_levels(a.level, pt.level, "mul_plain")
        if a.level < 1:
            raise DepthBudgetError("mul_plain", a.level)
        chain = self.ctx.chain
        c0, c1 = [], []
        for j in range(a.level + 1):
            ctx = chain.context(j)
            c0.append(ctx.mul(a.c0[j], pt.parts[j]))
            c1.append(ctx.mul(a.c1[j], pt.parts[j]))
        return Ciphertext(c0, c1, a.level, a.scale * pt.scale, a.key_id)

    def mul_relin(self, a: Ciphertext, b: Ciphertext) -> Ciphertext:
        _check_levels(a.level, b.level, "mul_cipher")
        if a.level < 1:
            raise DepthBudgetError("mul_cipher", a.level)
        chain = self.ctx.chain
        d0, d1, d2 = [], [], []
        for j in range(a.level + 1):
            ctx = chain.context(j)
            d0.append(ctx.mul(a.c0[j], b.c0[j]))
            cross = add_mod(ctx.mul(a.c0[j], b.c1[j]), ctx.mul(a.c1[j], b.c0[j]), ctx.q)
            d1.append(cross)
            d2.append(ctx.mul(a.c1[j], b.c1[j]))
        e0, e1 = self._keyswitch(d2, self.keys.relin, a.level)
        c0 = [add_mod(x, y, chain.primes[j]) for j, (x, y) in enumerate(zip(d0, e0))]
        c1 = [add_mod(x, y, chain.primes[j]) for j, (x, y) in enumerate(zip(d1, e1))]
        return Ciphertext(c0, c1, a.level, a.scale * b.scale, a.key_id)

    def rescale(self, a: Ciphertext) -> Ciphertext:
        """Drop the top active prime and divide message and scale by it."""
        if a.level < 1:
            raise DepthBudgetError("rescale", a.level)
        chain = self.ctx.chain
        top = a.level
        q_top = chain.data_primes[top]
        top_ctx = chain.context(top)
        inv = chain.inv_qtop[top]
        out_parts = []
        for part in (a.c0, a.c1):
            r = top_ctx.intt(part[top]).astype(np.int64)
            r = np.where(r > q_top // 2, r - q_top, r)  # centered: round-to-nearest
            new = []
            for j in range(top):
                ctx = chain.context(j)
                r_j = ctx.ntt(reduce_mod(r, ctx.q))
                diff = sub_mod(part[j], r_j, ctx.q)
                new.append(ctx.mul(diff, np.full(self.ctx.degree, inv[j], dtype=np.uint64)))
            out_parts.append(new)
        return Ciphertext(out_parts[0], out_parts[1], a.level - 1,
                          a.scale / q_top, a.key_id)

    def drop_level(self, a: Ciphertext, level: int) -> Ciphertext:
        """Discard trailing RNS components; message and scale unchanged."""
        if level > a.level or level < 0:
            raise AlignmentError(f"cannot drop from level {a.level} to {level}")
        return Ciphertext(
            [p.copy() for p in a.c0[: level + 1]],
            [p.copy() for p in a.c1[: level + 1]],
            level, a.scale, a.key_id,
        )

    def rotate(self, a: Ciphertext, step: int) -> Ciphertext:
        """Cyclic left rotation by `step` slots via the X -> X**(5**step) map."""
        if step == 0:
            return a.copy()
        key = self.keys.galois.get(step)
        if key is None:
            raise RotationKeyError(step)
        elt = self.ctx.galois_element(step)
        c0p = self.ctx.apply_automorphism(a.c0[: a.level + 1], elt)
        c1p = self.ctx.apply_automorphism(a.c1[: a.level + 1], elt)
        e0, e1 = self._keyswitch(c1p, key, a.level)
        chain = self.ctx.chain
        c0 = [add_mod(x, y, chain.primes[j]) for j, (x, y) in enumerate(zip(c0p, e0))]
        return Ciphertext(c0, e1, a.level, a.scale, a.key_id)

    # -- key switching --------------------------------------------------------

    def _keyswitch(self, parts: list[np.ndarray], key: KSwitchKey, level: int):
        """Switch the polynomial given by `parts` (NTT, data primes 0..level)
        onto the key's secret; returns the (e0, e1) pair over the same primes.

        Digit i is the coefficient form of the residue mod q_i; every digit is
        multiplied into the key over all active primes plus the special one,
        then the special prime is divided out with centered rounding.
        """
        chain = self.ctx.chain
        sp = chain.special_index
        sp_ctx = chain.special_context
        active = list(range(level + 1)) + [sp]
        acc0 = {j: np.zeros(self.ctx.degree, dtype=np.uint64) for j in active}
        acc1 = {j: np.zeros(self.ctx.degree, dtype=np.uint64) for j in active}
        for i in range(level + 1):
            digit_ctx = chain.context(i)
            digit = digit_ctx.intt(parts[i])  # coefficients in [0, q_i)
            for j in active:
                ctx = chain.context(j)
                if j == i:
                    r_hat = parts[i]  # already NTT-domain for its own prime
                else:
                    r = digit if ctx.q > digit_ctx.q else ctx.reduce(digit)
                    r_hat = ctx.ntt(r)
                ctx.muladd_into(acc0[j], r_hat, key.k0[i][j])
                ctx.muladd_into(acc1[j], r_hat, key.k1[i][j])
        for j in active:
            ctx = chain.context(j)
            acc0[j] = ctx.reduce(acc0[j])
            acc1[j] = ctx.reduce(acc1[j])

        # divide by the special prime with centered rounding
        p = chain.special_prime
        out0, out1 = [], []
        for acc, out in ((acc0, out0), (acc1, out1)):
            r = sp_ctx.intt(acc[sp]).astype(np.int64)
            r = np.where(r > p // 2, r - p, r)
            for j in range(level + 1):
                ctx = chain.context(j)
                r_j = ctx.ntt(reduce_mod(r, ctx.q))
                diff = sub_mod(acc[j], r_j, ctx.q)
                inv = np.full(self.ctx.degree, chain.inv_special[j], dtype=np.uint64)
                out.append(ctx.mul(diff, inv))
        return out0, out1
