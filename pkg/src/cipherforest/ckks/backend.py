"""CKKS implementation of the leveled-SIMD engine contract.

One engine instance owns a context, a key set (generated deterministically
from the construction seed) and the encryption randomness.  Multiplications
rescale automatically, so one engine level always equals one chain prime.
Plaintext operands are encoded lazily and cached, keyed by content digest,
level and exact scale; the packed model constants therefore pay their
encoding FFT/NTTs once per level they are used at.
"""

from __future__ import annotations

import hashlib
from collections import OrderedDict
from typing import Union

import numpy as np

from ..engine import CipherHandle, Engine, EngineParams, PlainOperand
from ..errors import AlignmentError, DimensionError
from .context import CkksContext, CkksParams
from .encoder import WORKING_RANGE
from .ops import Ciphertext, CkksEvaluator, Plaintext

_PLAINTEXT_CACHE_SIZE = 256


class CkksEngine(Engine):
    def __init__(self, params: EngineParams, rotation_steps=None, seed: int = 0,
                 keyset=None):
        super().__init__(params)
        self.ckks_params = CkksParams(
            poly_degree=2 * params.slot_count,
            depth_budget=params.depth_budget,
            scale_bits=params.scale_bits,
        )
        self.context = CkksContext(self.ckks_params)
        if keyset is None:
            steps = sorted(set(int(s) for s in (rotation_steps or []) if int(s) != 0))
            self.keys = self.context.keygen(seed=seed, rotation_steps=steps)
        else:
            self.keys = keyset
        self.evaluator = CkksEvaluator(self.context, self.keys)
        self._rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED]))
        self._pt_cache: OrderedDict = OrderedDict()

    @classmethod
    def from_keyset(cls, params: EngineParams, keyset, seed: int = 0) -> "CkksEngine":
        """Build an engine around previously generated (possibly secretless) keys."""
        return cls(params, keyset=keyset, seed=seed)

    # -- plaintext handling --------------------------------------------------

    def _encode_plain(self, p: np.ndarray, scale: float, level: int) -> Plaintext:
        key = (
            hashlib.blake2b(p.tobytes(), digest_size=16).digest(),
            level,
            scale.hex() if isinstance(scale, float) else scale,
        )
        hit = self._pt_cache.get(key)
        if hit is not None:
            self._pt_cache.move_to_end(key)
            return hit
        pt = self.evaluator.encode(p, scale, level)
        self._pt_cache[key] = pt
        if len(self._pt_cache) > _PLAINTEXT_CACHE_SIZE:
            self._pt_cache.popitem(last=False)
        return pt

    def _wrap(self, ct: Ciphertext) -> CipherHandle:
        return CipherHandle(payload=ct, level=ct.level, scale=ct.scale,
                            engine_id=self.engine_id)

    # -- contract --------------------------------------------------------------

    def encode_encrypt(self, v: PlainOperand) -> CipherHandle:
        v = self._check_slots(np.asarray(v, dtype=np.float64))
        pt = self.evaluator.encode(
            v, self.ckks_params.scale, self.context.chain.max_level,
            limit=WORKING_RANGE,
        )
        ct = self.evaluator.encrypt(pt, self._rng)
        return self._wrap(ct)

    def decrypt_decode(self, c: CipherHandle) -> np.ndarray:
        self._own(c, "decrypt_decode")
        return self.evaluator.decrypt_decode(c.payload)

    def add(self, a: CipherHandle, b: Union[CipherHandle, PlainOperand]) -> CipherHandle:
        self._own(a, "add")
        if isinstance(b, CipherHandle):
            self._own(b, "add")
            if a.level != b.level:
                raise AlignmentError(f"add: level mismatch ({a.level} vs {b.level})")
            out = self.evaluator.add(a.payload, b.payload)
        else:
            p = self._as_plain(b)
            pt = self._encode_plain(p, a.payload.scale, a.level)
            out = self.evaluator.add_plain(a.payload, pt)
        self._counter.additions += 1
        return self._wrap(out)

    def mul_plain(self, c: CipherHandle, p: PlainOperand) -> CipherHandle:
        self._own(c, "mul_plain")
        self._require_level(c, "mul_plain")
        p = self._as_plain(p)
        pt = self._encode_plain(p, self.ckks_params.scale, c.level)
        out = self.evaluator.rescale(self.evaluator.mul_plain(c.payload, pt))
        self._counter.plain_multiplications += 1
        handle = self._wrap(out)
        self._note_depth(handle.level)
        return handle

    def mul_cipher(self, a: CipherHandle, b: CipherHandle) -> CipherHandle:
        self._own(a, "mul_cipher")
        self._own(b, "mul_cipher")
        if a.level != b.level:
            raise AlignmentError(f"mul_cipher: level mismatch ({a.level} vs {b.level})")
        self._require_level(a, "mul_cipher")
        out = self.evaluator.rescale(self.evaluator.mul_relin(a.payload, b.payload))
        self._counter.cipher_multiplications += 1
        handle = self._wrap(out)
        self._note_depth(handle.level)
        return handle

    def rotate(self, c: CipherHandle, steps: int) -> CipherHandle:
        self._own(c, "rotate")
        n = self.params.slot_count
        if not 0 <= steps < n:
            raise DimensionError(f"rotation step must be in [0, {n}), got {steps}")
        out = self.evaluator.rotate(c.payload, steps)
        self._counter.rotations += 1
        return self._wrap(out)

    def negate(self, c: CipherHandle) -> CipherHandle:
        self._own(c, "negate")
        return self._wrap(self.evaluator.negate(c.payload))

    def drop_level(self, c: CipherHandle, level: int) -> CipherHandle:
        self._own(c, "drop_level")
        if level > c.level or level < 0:
            raise AlignmentError(f"cannot drop from level {c.level} to {level}")
        return self._wrap(self.evaluator.drop_level(c.payload, level))
