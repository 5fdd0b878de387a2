"""Canonical-embedding encoder: real slot vectors <-> ring coefficients.

A message of n = N/2 real slots is placed on the primitive 2N-th roots of
unity.  Slot j sits at the root psi**(5**j mod 2N); the other half of the
roots carry the complex conjugates, which keeps the polynomial real.  This
ordering makes the ring automorphism X -> X**(5**s) act on the message as a
cyclic left shift by s slots, which is exactly the rotation the SIMD layer
exposes.

Both directions run through one length-N complex FFT, so the numerical error
floor (~1e-13 relative) sits far below the quantization error of the scale.
"""

from __future__ import annotations

import numpy as np

from ..errors import DimensionError, EncodingRangeError

# Largest slot magnitude accepted at the encrypt boundary.  Inputs and model
# constants live in [-2, 2]; anything bigger signals a packing bug upstream.
WORKING_RANGE = 2.0

# Plaintext multiplication operands (e.g. monomial coefficients of the fitted
# activation) may be larger; they are capped by the decryption headroom of the
# anchor prime: |slot| * 2**scale_bits must stay below q_0 / 2 with margin.
PLAIN_OPERAND_RANGE = 512.0


class SlotEncoder:
    def __init__(self, degree: int):
        self.degree = degree
        self.slots = degree // 2
        two_n = 2 * degree

        # slot j <-> exponent 5**j (mod 2N); conjugate at 2N - e
        exps = np.empty(self.slots, dtype=np.int64)
        e = 1
        for j in range(self.slots):
            exps[j] = e
            e = e * 5 % two_n
        self.exponents = exps
        # position of exponent e in the odd-root enumeration psi**(2t+1)
        self._slot_pos = (exps - 1) // 2
        self._conj_pos = (two_n - exps - 1) // 2

        k = np.arange(degree)
        self._psi_pows = np.exp(1j * np.pi * k / degree)
        self._ipsi_pows = np.exp(-1j * np.pi * k / degree)

    def embed(self, slots: np.ndarray) -> np.ndarray:
        """Real slot values -> real (unscaled, unrounded) ring coefficients."""
        slots = np.asarray(slots, dtype=np.float64)
        if slots.shape != (self.slots,):
            raise DimensionError(
                f"encoder expects {self.slots} slots, got shape {slots.shape}"
            )
        vals = np.zeros(self.degree, dtype=np.complex128)
        vals[self._slot_pos] = slots
        vals[self._conj_pos] = slots  # conjugate of a real value
        a = np.fft.fft(vals) / self.degree
        coeffs = a * self._ipsi_pows
        return coeffs.real

    def project(self, coeffs: np.ndarray) -> np.ndarray:
        """Real ring coefficients -> real slot values (inverse of embed)."""
        coeffs = np.asarray(coeffs, dtype=np.float64)
        if coeffs.shape != (self.degree,):
            raise DimensionError(
                f"encoder expects {self.degree} coefficients, got shape {coeffs.shape}"
            )
        vals = np.fft.ifft(coeffs * self._psi_pows) * self.degree
        return vals[self._slot_pos].real

    def encode_integers(
        self, slots: np.ndarray, scale: float, limit: float = PLAIN_OPERAND_RANGE
    ) -> np.ndarray:
        """Scale, embed and round to the integer coefficients of a plaintext.

        Raises :class:`EncodingRangeError` when slot values exceed `limit`
        (the scaled coefficients would threaten the decryption headroom of
        the final modulus).
        """
        slots = np.asarray(slots, dtype=np.float64)
        if np.max(np.abs(slots), initial=0.0) > limit * (1 + 1e-12):
            raise EncodingRangeError(
                f"slot magnitude {np.max(np.abs(slots)):.3g} exceeds the "
                f"allowed range {limit}"
            )
        coeffs = np.rint(self.embed(slots) * scale)
        if np.max(np.abs(coeffs), initial=0.0) >= 2**62:
            raise EncodingRangeError("scaled plaintext coefficients overflow int64")
        return coeffs.astype(np.int64)
