"""Chebyshev approximation of the tanh dilatation activation on [-1, 1] and
its leveled evaluation schedule.

The fit interpolates tanh(a*x) at m+1 Chebyshev nodes and converts to the
monomial basis.  Homomorphic evaluation computes the binary powers x^2, x^4,
... by repeated squaring, assembles each needed monomial from them, applies
the coefficients as plaintext multiplications and sums everything at the
deepest level reached, so the consumed depth is always ceil(log2 m) + 1 --
in a leveled scheme the binding constraint is depth, not multiplication
count, which is why Horner's rule (depth m) is not used.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.polynomial import chebyshev

from .engine import CipherHandle, Engine
from .errors import DepthBudgetError

COEF_TOL = 1e-15  # monomial coefficients below this are treated as zero
ERROR_GRID = 100_000


def poly_depth(degree: int) -> int:
    """Multiplicative levels consumed by the evaluation schedule."""
    if degree < 1:
        raise ValueError("degree must be >= 1")
    return max(0, int(np.ceil(np.log2(degree)))) + 1


@dataclass
class ChebyshevPoly:
    degree: int
    coefficients: np.ndarray      # monomial basis; index = power
    max_error: float              # measured sup-error on a dense grid
    dilatation: float             # the a of the tanh target

    @property
    def depth(self) -> int:
        return poly_depth(self.degree)

    def eval_clear(self, x):
        return np.polynomial.polynomial.polyval(np.asarray(x, dtype=np.float64),
                                                self.coefficients)

    def active_powers(self) -> list[int]:
        return [
            k for k in range(1, self.degree + 1)
            if abs(self.coefficients[k]) > COEF_TOL
        ]

    def plan_counts(self) -> dict:
        """Operation counts of the homomorphic schedule, for the complexity
        report: cipher multiplications (powers + monomial assembly), plaintext
        multiplications (one per active coefficient) and additions."""
        monomials = self.active_powers()
        cipher_mults = _assembly_mults(monomials)
        additions = max(0, len(monomials) - 1)
        if abs(self.coefficients[0]) > COEF_TOL:
            additions += 1
        return {
            "cipher_multiplications": cipher_mults,
            "plain_multiplications": len(monomials),
            "additions": additions,
            "depth": self.depth,
        }


def fit_tanh(a: float, m: int) -> ChebyshevPoly:
    """Interpolate tanh(a*x) on [-1, 1] at m+1 Chebyshev nodes."""
    if m < 1:
        raise ValueError("degree must be >= 1")
    if a <= 0:
        raise ValueError("dilatation must be positive")
    cheb_coef = chebyshev.chebinterpolate(lambda x: np.tanh(a * x), m)
    mono = chebyshev.cheb2poly(cheb_coef)
    # basis-conversion float dust (e.g. the even coefficients of an odd
    # target) would otherwise cost real homomorphic multiplications
    mono[np.abs(mono) < 1e-13 * np.abs(mono).max()] = 0.0
    grid = np.linspace(-1.0, 1.0, ERROR_GRID)
    err = float(np.max(np.abs(
        np.polynomial.polynomial.polyval(grid, mono) - np.tanh(a * grid)
    )))
    return ChebyshevPoly(degree=m, coefficients=np.asarray(mono, dtype=np.float64),
                         max_error=err, dilatation=float(a))


def _highest_bit(k: int) -> int:
    return 1 << (k.bit_length() - 1)


def _assembly_mults(monomials: list[int]) -> int:
    """Cipher multiplications needed for the given powers: squarings for the
    binary powers plus one multiply per composition step, memoized exactly as
    the evaluator performs them."""
    if not monomials:
        return 0
    have = {1}
    count = 0

    def build(k: int):
        nonlocal count
        if k in have:
            return
        if k & (k - 1) == 0:  # power of two: square the previous one
            build(k // 2)
            count += 1
        else:
            hi = _highest_bit(k)
            build(hi)
            build(k - hi)
            count += 1
        have.add(k)

    for k in sorted(monomials):
        build(k)
    return count


def eval_homomorphic(poly: ChebyshevPoly, engine: Engine, c: CipherHandle) -> CipherHandle:
    """Apply the polynomial to every slot; consumes exactly `poly.depth` levels.

    Slots outside [-1, 1] are not rejected here (polynomials extrapolate);
    the compiler's range analysis is responsible for keeping activation
    inputs inside the fitted domain.
    """
    if c.level < poly.depth:
        raise DepthBudgetError(
            f"polynomial activation (degree {poly.degree}, needs {poly.depth})",
            c.level,
        )
    target = c.level - poly.depth
    monomials = poly.active_powers()
    powers: dict[int, CipherHandle] = {1: c}

    def build(k: int) -> CipherHandle:
        if k in powers:
            return powers[k]
        if k & (k - 1) == 0:
            half = build(k // 2)
            out = engine.mul_cipher(half, half)
        else:
            hi = build(_highest_bit(k))
            lo = build(k - _highest_bit(k))
            lvl = min(hi.level, lo.level)
            out = engine.mul_cipher(
                engine.drop_level(hi, lvl), engine.drop_level(lo, lvl)
            )
        powers[k] = out
        return out

    acc = None
    for k in sorted(monomials):
        term = engine.mul_plain(build(k), float(poly.coefficients[k]))
        term = engine.drop_level(term, target)
        acc = term if acc is None else engine.add(acc, term)
    if acc is None:
        raise ValueError("polynomial has no active terms of degree >= 1")
    if abs(poly.coefficients[0]) > COEF_TOL:
        acc = engine.add(acc, float(poly.coefficients[0]))
    return acc
