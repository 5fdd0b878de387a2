"""Leveled-SIMD evaluation contract and the exact plaintext reference backend.

Every homomorphic program in this package is written against :class:`Engine`:
slotwise add / multiply, cyclic rotation, and per-handle level bookkeeping.
The reference backend stores exact float64 slot vectors and is the correctness
oracle; the CKKS backend (:mod:`cipherforest.ckks.backend`) implements the
same contract on real ciphertexts.
"""

from __future__ import annotations

import itertools
from abc import ABC, abstractmethod
from dataclasses import dataclass, replace
from typing import Union

import numpy as np

from .errors import (
    AlignmentError,
    DepthBudgetError,
    DimensionError,
    KeyMismatchError,
)

SlotVector = np.ndarray
PlainOperand = Union[np.ndarray, list, float, int]

_engine_ids = itertools.count(1)


@dataclass(frozen=True)
class EngineParams:
    """Geometry and budget of a leveled SIMD engine.

    slot_count is n = N/2 and must be a power of two; depth_budget is the
    number of multiplicative levels a fresh ciphertext supports; scale_bits
    is log2 of the fixed-point scale (ignored by the reference backend).
    """

    slot_count: int
    depth_budget: int
    scale_bits: int = 40
    backend: str = "reference"

    def __post_init__(self):
        if self.slot_count < 1 or (self.slot_count & (self.slot_count - 1)) != 0:
            raise DimensionError(f"slot_count must be a power of two, got {self.slot_count}")
        if self.depth_budget < 1:
            raise ValueError("depth_budget must be at least 1")
        if self.scale_bits < 1:
            raise ValueError("scale_bits must be positive")
        if self.backend not in ("reference", "ckks"):
            raise ValueError(f"unknown backend '{self.backend}'")


@dataclass
class OpCounter:
    """Cumulative homomorphic-operation counts for one evaluation context."""

    additions: int = 0
    plain_multiplications: int = 0
    cipher_multiplications: int = 0
    rotations: int = 0
    depth_consumed: int = 0

    def copy(self) -> "OpCounter":
        return replace(self)

    def delta(self, earlier: "OpCounter") -> "OpCounter":
        """Counts accumulated since the `earlier` snapshot (depth is absolute)."""
        return OpCounter(
            additions=self.additions - earlier.additions,
            plain_multiplications=self.plain_multiplications - earlier.plain_multiplications,
            cipher_multiplications=self.cipher_multiplications - earlier.cipher_multiplications,
            rotations=self.rotations - earlier.rotations,
            depth_consumed=self.depth_consumed,
        )

    def as_dict(self) -> dict:
        return {
            "additions": self.additions,
            "plain_multiplications": self.plain_multiplications,
            "cipher_multiplications": self.cipher_multiplications,
            "rotations": self.rotations,
            "depth_consumed": self.depth_consumed,
        }


@dataclass
class CipherHandle:
    """An encrypted (or simulated) slot vector with level and scale tracking."""

    payload: object
    level: int
    scale: float
    engine_id: int


class Engine(ABC):
    """Abstract leveled-SIMD engine.

    Level semantics: a fresh handle starts at ``depth_budget`` remaining
    levels; every multiplication (plain or cipher) consumes exactly one;
    additions and rotations are free.  Violating the budget raises
    :class:`DepthBudgetError` instead of corrupting slots.
    """

    def __init__(self, params: EngineParams):
        self.params = params
        self.engine_id = next(_engine_ids)
        self._counter = OpCounter()

    # -- bookkeeping ------------------------------------------------------

    def counters(self) -> OpCounter:
        return self._counter.copy()

    def reset_counters(self) -> None:
        self._counter = OpCounter()

    def _own(self, c: CipherHandle, op: str) -> None:
        if c.engine_id != self.engine_id:
            raise KeyMismatchError(
                f"'{op}' got a handle from engine {c.engine_id}, "
                f"this is engine {self.engine_id}"
            )

    def _check_slots(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.ndim != 1 or v.shape[0] != self.params.slot_count:
            raise DimensionError(
                f"slot vector must have length {self.params.slot_count}, got shape {v.shape}"
            )
        return v

    def _as_plain(self, p: PlainOperand) -> np.ndarray:
        """Broadcast scalars to a full slot vector, validate arrays."""
        if isinstance(p, (int, float, np.floating, np.integer)):
            return np.full(self.params.slot_count, float(p))
        return self._check_slots(p)

    def _note_depth(self, level: int) -> None:
        used = self.params.depth_budget - level
        if used > self._counter.depth_consumed:
            self._counter.depth_consumed = used

    def _require_level(self, c: CipherHandle, op: str) -> None:
        if c.level < 1:
            raise DepthBudgetError(op, c.level)

    # -- contract ---------------------------------------------------------

    @abstractmethod
    def encode_encrypt(self, v: PlainOperand) -> CipherHandle:
        """Encrypt a slot vector; returns a handle at full level."""

    @abstractmethod
    def decrypt_decode(self, c: CipherHandle) -> SlotVector:
        """Recover the message-space vector of a handle from this engine."""

    @abstractmethod
    def add(self, a: CipherHandle, b: Union[CipherHandle, PlainOperand]) -> CipherHandle:
        """Slotwise sum; level unchanged; counts one addition."""

    @abstractmethod
    def mul_plain(self, c: CipherHandle, p: PlainOperand) -> CipherHandle:
        """Slotwise product with a plaintext; consumes one level."""

    @abstractmethod
    def mul_cipher(self, a: CipherHandle, b: CipherHandle) -> CipherHandle:
        """Slotwise product of two ciphertexts at equal level; consumes one level."""

    @abstractmethod
    def rotate(self, c: CipherHandle, steps: int) -> CipherHandle:
        """Cyclic left rotation of all n slots; level unchanged."""

    @abstractmethod
    def negate(self, c: CipherHandle) -> CipherHandle:
        """Slotwise negation; free (no level, no counter)."""

    @abstractmethod
    def drop_level(self, c: CipherHandle, level: int) -> CipherHandle:
        """Lower a handle to `level` without multiplying (alignment only)."""

    def sub(self, a: CipherHandle, b: Union[CipherHandle, PlainOperand]) -> CipherHandle:
        """a - b as one addition of a negated operand."""
        if isinstance(b, CipherHandle):
            return self.add(a, self.negate(b))
        return self.add(a, -self._as_plain(b))


class ReferenceEngine(Engine):
    """Exact float64 backend: payload is the plain slot vector itself."""

    def __init__(self, params: EngineParams):
        super().__init__(params)

    def encode_encrypt(self, v: PlainOperand) -> CipherHandle:
        v = self._check_slots(np.asarray(v, dtype=np.float64))
        return CipherHandle(
            payload=v.copy(),
            level=self.params.depth_budget,
            scale=float(2 ** self.params.scale_bits),
            engine_id=self.engine_id,
        )

    def decrypt_decode(self, c: CipherHandle) -> SlotVector:
        self._own(c, "decrypt_decode")
        return c.payload.copy()

    def add(self, a, b):
        self._own(a, "add")
        if isinstance(b, CipherHandle):
            self._own(b, "add")
            if a.level != b.level:
                raise AlignmentError(f"add: level mismatch ({a.level} vs {b.level})")
            other = b.payload
            level = a.level
        else:
            other = self._as_plain(b)
            level = a.level
        self._counter.additions += 1
        return CipherHandle(a.payload + other, level, a.scale, self.engine_id)

    def mul_plain(self, c, p):
        self._own(c, "mul_plain")
        self._require_level(c, "mul_plain")
        p = self._as_plain(p)
        self._counter.plain_multiplications += 1
        out = CipherHandle(c.payload * p, c.level - 1, c.scale, self.engine_id)
        self._note_depth(out.level)
        return out

    def mul_cipher(self, a, b):
        self._own(a, "mul_cipher")
        self._own(b, "mul_cipher")
        if a.level != b.level:
            raise AlignmentError(f"mul_cipher: level mismatch ({a.level} vs {b.level})")
        self._require_level(a, "mul_cipher")
        self._counter.cipher_multiplications += 1
        out = CipherHandle(a.payload * b.payload, a.level - 1, a.scale, self.engine_id)
        self._note_depth(out.level)
        return out

    def rotate(self, c, steps):
        self._own(c, "rotate")
        n = self.params.slot_count
        if not 0 <= steps < n:
            raise DimensionError(f"rotation step must be in [0, {n}), got {steps}")
        self._counter.rotations += 1
        return CipherHandle(np.roll(c.payload, -steps), c.level, c.scale, self.engine_id)

    def negate(self, c):
        self._own(c, "negate")
        return CipherHandle(-c.payload, c.level, c.scale, self.engine_id)

    def drop_level(self, c, level):
        self._own(c, "drop_level")
        if level > c.level or level < 0:
            raise AlignmentError(f"cannot drop from level {c.level} to {level}")
        return CipherHandle(c.payload.copy(), level, c.scale, self.engine_id)


def make_engine(params: EngineParams, rotation_steps=None, seed: int = 0) -> Engine:
    """Instantiate the backend named by `params.backend`.

    `rotation_steps` (iterable of ints) declares the Galois keys the CKKS
    backend generates; the reference backend ignores it.
    """
    if params.backend == "reference":
        return ReferenceEngine(params)
    from .ckks.backend import CkksEngine

    return CkksEngine(params, rotation_steps=rotation_steps, seed=seed)
