"""Word-sized modular arithmetic and the negacyclic NTT, one context per prime.

All element arrays are uint64.  Moduli must stay below 2**50 so that the
float64-assisted Barrett step estimates every quotient to within one unit
(float64 carries 53 mantissa bits; a*b/q < q < 2**50 leaves slack for the
roundings of the product and of the precomputed 1/q).

The transform and the fused multiply kernels are numba-jitted: a single
N=16384 pass runs in ~0.4 ms, which keeps key switching on the full modulus
chain interactive.  Plain numpy versions of the elementwise helpers are kept
alongside and double as the oracle in the unit tests.
"""

from __future__ import annotations

import numpy as np
from numba import njit

MAX_MODULUS_BITS = 50

_U64 = np.uint64
_I64 = np.int64


# ---------------------------------------------------------------------------
# elementwise modular arithmetic (numpy reference versions)
# ---------------------------------------------------------------------------

def mul_mod_numpy(a, b, q: int):
    """Elementwise a*b mod q; reference implementation of the float trick."""
    a = np.asarray(a, dtype=_U64)
    b = np.asarray(b, dtype=_U64)
    prod = a * b
    quo = (a.astype(np.float64) * b.astype(np.float64) / q).astype(_U64)
    r = prod - quo * _U64(q)
    r = np.where(r.astype(_I64) < 0, r + _U64(q), r)
    r = np.where(r >= _U64(q), r - _U64(q), r)
    return r


def add_mod(a, b, q: int):
    s = np.asarray(a, dtype=_U64) + np.asarray(b, dtype=_U64)
    return np.where(s >= _U64(q), s - _U64(q), s)


def sub_mod(a, b, q: int):
    a = np.asarray(a, dtype=_U64)
    b = np.asarray(b, dtype=_U64)
    d = a - b
    return np.where(a < b, d + _U64(q), d)


def neg_mod(a, q: int):
    a = np.asarray(a, dtype=_U64)
    return np.where(a == 0, a, _U64(q) - a)


def reduce_mod(values: np.ndarray, q: int):
    """Reduce signed or oversized integer values into [0, q)."""
    return np.mod(values, q).astype(_U64)


# ---------------------------------------------------------------------------
# jitted kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _mulmod_kernel(a, b, q, qinv):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        x = a[i]
        y = b[i]
        quo = _U64(np.float64(x) * np.float64(y) * qinv)
        r = x * y - quo * q
        if _I64(r) < 0:
            r += q
        elif r >= q:
            r -= q
        out[i] = r
    return out


@njit(cache=True)
def _muladd_kernel(acc, a, b, q, qinv):
    # acc accumulates reduced products without further reduction; callers
    # keep the term count below 2**14 so the raw uint64 sum cannot wrap.
    for i in range(a.shape[0]):
        x = a[i]
        y = b[i]
        quo = _U64(np.float64(x) * np.float64(y) * qinv)
        r = x * y - quo * q
        if _I64(r) < 0:
            r += q
        elif r >= q:
            r -= q
        acc[i] += r


@njit(cache=True)
def _mod_kernel(a, q, qinv):
    out = np.empty_like(a)
    for i in range(a.shape[0]):
        x = a[i]
        quo = _U64(np.float64(x) * qinv)
        r = x - quo * q
        if _I64(r) < 0:
            r += q
        elif r >= q:
            r -= q
        out[i] = r
    return out


@njit(cache=True)
def _ntt_kernel(a, psi_brv, q, qinv):
    n = a.shape[0]
    t = n
    m = 1
    while m < n:
        t >>= 1
        for i in range(m):
            s = psi_brv[m + i]
            sf = np.float64(s)
            j1 = 2 * i * t
            for j in range(j1, j1 + t):
                u = a[j]
                x = a[j + t]
                quo = _U64(np.float64(x) * sf * qinv)
                v = x * s - quo * q
                if _I64(v) < 0:
                    v += q
                elif v >= q:
                    v -= q
                w = u + v
                if w >= q:
                    w -= q
                a[j] = w
                if u >= v:
                    a[j + t] = u - v
                else:
                    a[j + t] = u + q - v
        m <<= 1


@njit(cache=True)
def _intt_kernel(a, ipsi_brv, q, qinv, n_inv):
    n = a.shape[0]
    t = 1
    m = n
    while m > 1:
        h = m >> 1
        j1 = 0
        for i in range(h):
            s = ipsi_brv[h + i]
            sf = np.float64(s)
            for j in range(j1, j1 + t):
                u = a[j]
                v = a[j + t]
                w = u + v
                if w >= q:
                    w -= q
                a[j] = w
                if u >= v:
                    d = u - v
                else:
                    d = u + q - v
                quo = _U64(np.float64(d) * sf * qinv)
                r = d * s - quo * q
                if _I64(r) < 0:
                    r += q
                elif r >= q:
                    r -= q
                a[j + t] = r
            j1 += 2 * t
        t <<= 1
        m = h
    nf = np.float64(n_inv)
    for j in range(n):
        x = a[j]
        quo = _U64(np.float64(x) * nf * qinv)
        r = x * n_inv - quo * q
        if _I64(r) < 0:
            r += q
        elif r >= q:
            r -= q
        a[j] = r


# ---------------------------------------------------------------------------
# primes
# ---------------------------------------------------------------------------

def is_prime(n: int) -> bool:
    """Deterministic Miller-Rabin for 64-bit integers."""
    if n < 2:
        return False
    for p in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % p == 0:
            return n == p
    d = n - 1
    r = 0
    while d % 2 == 0:
        d //= 2
        r += 1
    for a in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = x * x % n
            if x == n - 1:
                break
        else:
            return False
    return True


def find_ntt_primes(bits: int, count: int, two_n: int, exclude=()) -> list[int]:
    """Find `count` primes == 1 (mod two_n) near 2**bits.

    Candidates alternate above and below 2**bits so the product of the data
    primes drifts as little as possible from the nominal scale.
    """
    if bits > MAX_MODULUS_BITS:
        raise ValueError(f"moduli above 2**{MAX_MODULUS_BITS} are not supported")
    base = 1 << bits
    found: list[int] = []
    exclude = set(exclude)
    up = base + 1
    down = base + 1 - two_n
    while len(found) < count:
        for cand in (up, down):
            if len(found) >= count:
                break
            if cand > two_n and is_prime(cand) and cand not in exclude and cand not in found:
                found.append(cand)
        up += two_n
        down -= two_n
        if down <= two_n and up > (1 << (bits + 2)):
            raise ValueError(f"could not find {count} NTT primes near 2**{bits}")
    return found


def _find_primitive_2n_root(q: int, two_n: int) -> int:
    """A generator of the order-2n subgroup of Z_q*, i.e. a root of X^n + 1."""
    assert (q - 1) % two_n == 0
    cofactor = (q - 1) // two_n
    for g in range(2, q):
        root = pow(g, cofactor, q)
        if pow(root, two_n // 2, q) == q - 1:  # order exactly 2n
            return root
    raise ValueError(f"no primitive {two_n}-th root mod {q}")


def _bit_reverse_indices(n: int) -> np.ndarray:
    bits = n.bit_length() - 1
    idx = np.arange(n, dtype=np.int64)
    rev = np.zeros(n, dtype=np.int64)
    for b in range(bits):
        rev |= ((idx >> b) & 1) << (bits - 1 - b)
    return rev


class PrimeContext:
    """NTT tables and transform kernels for one prime q == 1 (mod 2N)."""

    def __init__(self, q: int, degree: int):
        if degree < 2 or degree & (degree - 1):
            raise ValueError("degree must be a power of two >= 2")
        if q.bit_length() > MAX_MODULUS_BITS + 1:
            raise ValueError(f"{q} exceeds the supported modulus size")
        self.q = q
        self.qu = _U64(q)
        self.qinv = np.float64(1.0 / q)
        self.n = degree
        self.psi = _find_primitive_2n_root(q, 2 * degree)
        self.psi_inv = pow(self.psi, q - 2, q)
        self.n_inv = pow(degree, q - 2, q)

        rev = _bit_reverse_indices(degree)
        psi_pows = np.empty(degree, dtype=_U64)
        ipsi_pows = np.empty(degree, dtype=_U64)
        p = 1
        ip = 1
        for i in range(degree):
            psi_pows[i] = p
            ipsi_pows[i] = ip
            p = p * self.psi % q
            ip = ip * self.psi_inv % q
        self.psi_brv = psi_pows[rev].copy()
        self.ipsi_brv = ipsi_pows[rev].copy()

    # transforms return fresh arrays; inputs are never modified

    def ntt(self, a: np.ndarray) -> np.ndarray:
        """Forward negacyclic NTT; coefficient order in, evaluation order out."""
        out = np.array(a, dtype=_U64)
        _ntt_kernel(out, self.psi_brv, self.qu, self.qinv)
        return out

    def intt(self, a: np.ndarray) -> np.ndarray:
        """Inverse of :meth:`ntt`; returns coefficient order."""
        out = np.array(a, dtype=_U64)
        _intt_kernel(out, self.ipsi_brv, self.qu, self.qinv, _U64(self.n_inv))
        return out

    def mul(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        return _mulmod_kernel(np.ascontiguousarray(a), np.ascontiguousarray(b), self.qu, self.qinv)

    def muladd_into(self, acc: np.ndarray, a: np.ndarray, b: np.ndarray) -> None:
        """acc += a*b mod q, accumulating raw sums of reduced products."""
        _muladd_kernel(acc, np.ascontiguousarray(a), np.ascontiguousarray(b), self.qu, self.qinv)

    def reduce(self, a: np.ndarray) -> np.ndarray:
        """Bring uint64 values below 2**50 into [0, q)."""
        return _mod_kernel(np.ascontiguousarray(a, dtype=_U64), self.qu, self.qinv)

    def evaluation_exponents(self) -> np.ndarray:
        """exponent e(k) such that ntt(p)[k] = p(psi**e(k)), for every slot k.

        Derived by transforming the monomial X; the psi powers are distinct,
        so the value at each output index identifies its exponent.
        """
        mono = np.zeros(self.n, dtype=_U64)
        mono[1] = 1
        transformed = self.ntt(mono)
        value_to_exp = {}
        v = 1
        for e in range(2 * self.n):
            value_to_exp[v] = e
            v = v * self.psi % self.q
        return np.array([value_to_exp[int(x)] for x in transformed], dtype=np.int64)
