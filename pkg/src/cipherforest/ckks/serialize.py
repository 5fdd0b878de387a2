"""Versioned binary serialization of CKKS keys and ciphertexts.

Layout: a fixed header (magic, version, kind, ring degree, chain length,
scale bits) followed by kind-specific sections.  All residue arrays are
little-endian uint64 in NTT order, preceded by their prime so a reader can
verify it rebuilt the same modulus chain.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from ..errors import SchemaError
from .context import CkksContext, CkksParams, KeySet, KSwitchKey
from .ops import Ciphertext

MAGIC = b"CFHE"
VERSION = 1

KIND_CIPHERTEXT = 1
KIND_SECRET_KEYSET = 2
KIND_EVAL_KEYSET = 3

_HEADER = struct.Struct("<4sHBIHHH")  # magic, version, kind, N, chain, scale, special bits


def _pack_header(kind: int, params: CkksParams) -> bytes:
    return _HEADER.pack(
        MAGIC, VERSION, kind, params.poly_degree,
        params.depth_budget, params.scale_bits, params.special_prime_bits,
    )


def _unpack_header(buf: bytes, expected_kind: int) -> tuple[CkksParams, int]:
    if len(buf) < _HEADER.size:
        raise SchemaError("file too short for a CFHE header")
    magic, version, kind, degree, depth, scale_bits, special_bits = _HEADER.unpack_from(buf)
    if magic != MAGIC:
        raise SchemaError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise SchemaError(f"unsupported CFHE version {version}")
    if kind != expected_kind:
        raise SchemaError(f"expected kind {expected_kind}, file holds kind {kind}")
    params = CkksParams(
        poly_degree=degree, depth_budget=depth,
        scale_bits=scale_bits, special_prime_bits=special_bits,
    )
    return params, _HEADER.size


def _write_array(out: bytearray, arr: np.ndarray) -> None:
    data = np.ascontiguousarray(arr, dtype="<u8").tobytes()
    out += struct.pack("<I", arr.shape[0])
    out += data


def _read_array(buf: bytes, off: int) -> tuple[np.ndarray, int]:
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    arr = np.frombuffer(buf, dtype="<u8", count=n, offset=off).astype(np.uint64)
    return arr, off + 8 * n


def _write_parts(out: bytearray, parts: list[np.ndarray]) -> None:
    out += struct.pack("<H", len(parts))
    for p in parts:
        _write_array(out, p)


def _read_parts(buf: bytes, off: int) -> tuple[list[np.ndarray], int]:
    (k,) = struct.unpack_from("<H", buf, off)
    off += 2
    parts = []
    for _ in range(k):
        arr, off = _read_array(buf, off)
        parts.append(arr)
    return parts, off


def _write_kswitch(out: bytearray, key: KSwitchKey) -> None:
    out += struct.pack("<H", len(key.k0))
    for row in key.k0:
        _write_parts(out, row)
    for row in key.k1:
        _write_parts(out, row)


def _read_kswitch(buf: bytes, off: int) -> tuple[KSwitchKey, int]:
    (digits,) = struct.unpack_from("<H", buf, off)
    off += 2
    k0, k1 = [], []
    for _ in range(digits):
        row, off = _read_parts(buf, off)
        k0.append(row)
    for _ in range(digits):
        row, off = _read_parts(buf, off)
        k1.append(row)
    return KSwitchKey(k0=k0, k1=k1), off


# -- ciphertexts --------------------------------------------------------------

def ciphertext_to_bytes(ct: Ciphertext, params: CkksParams) -> bytes:
    out = bytearray(_pack_header(KIND_CIPHERTEXT, params))
    out += ct.key_id
    out += struct.pack("<Hd", ct.level, ct.scale)
    _write_parts(out, ct.c0)
    _write_parts(out, ct.c1)
    return bytes(out)


def ciphertext_from_bytes(buf: bytes, params: CkksParams) -> Ciphertext:
    file_params, off = _unpack_header(buf, KIND_CIPHERTEXT)
    if file_params != params:
        raise SchemaError(
            f"ciphertext parameters {file_params} do not match context {params}"
        )
    key_id = bytes(buf[off : off + 16])
    off += 16
    level, scale = struct.unpack_from("<Hd", buf, off)
    off += struct.calcsize("<Hd")
    c0, off = _read_parts(buf, off)
    c1, off = _read_parts(buf, off)
    if len(c0) != level + 1 or len(c1) != level + 1:
        raise SchemaError("ciphertext part count does not match its level")
    return Ciphertext(c0=c0, c1=c1, level=level, scale=scale, key_id=key_id)


# -- key sets -----------------------------------------------------------------

def keyset_to_bytes(keys: KeySet, params: CkksParams, include_secret: bool) -> bytes:
    kind = KIND_SECRET_KEYSET if include_secret else KIND_EVAL_KEYSET
    out = bytearray(_pack_header(kind, params))
    out += keys.key_id
    if include_secret:
        if keys.secret is None:
            raise SchemaError("key set holds no secret key")
        _write_parts(out, keys.secret)
    _write_parts(out, keys.public[0])
    _write_parts(out, keys.public[1])
    _write_kswitch(out, keys.relin)
    steps = sorted(keys.galois)
    out += struct.pack("<H", len(steps))
    for step in steps:
        out += struct.pack("<I", step)
        _write_kswitch(out, keys.galois[step])
    return bytes(out)


def keyset_from_bytes(buf: bytes, expect_secret: bool) -> tuple[KeySet, CkksParams]:
    kind = KIND_SECRET_KEYSET if expect_secret else KIND_EVAL_KEYSET
    params, off = _unpack_header(buf, kind)
    key_id = bytes(buf[off : off + 16])
    off += 16
    secret = None
    if expect_secret:
        secret, off = _read_parts(buf, off)
    pk0, off = _read_parts(buf, off)
    pk1, off = _read_parts(buf, off)
    relin, off = _read_kswitch(buf, off)
    (n_galois,) = struct.unpack_from("<H", buf, off)
    off += 2
    galois = {}
    for _ in range(n_galois):
        (step,) = struct.unpack_from("<I", buf, off)
        off += 4
        galois[step], off = _read_kswitch(buf, off)
    keys = KeySet(secret=secret, public=(pk0, pk1), relin=relin,
                  galois=galois, key_id=key_id)
    return keys, params


def validate_keyset_chain(keys: KeySet, context: CkksContext) -> None:
    """Cheap structural check that loaded keys fit the rebuilt chain."""
    n_data = len(context.chain.data_primes)
    if len(keys.public[0]) != n_data:
        raise SchemaError(
            f"public key covers {len(keys.public[0])} primes, chain has {n_data}"
        )
    if len(keys.relin.k0) != n_data:
        raise SchemaError("relinearization key digit count does not match the chain")
    for arr in keys.public[0]:
        if arr.shape[0] != context.degree:
            raise SchemaError("key array length does not match the ring degree")


@dataclass
class KeyFiles:
    """Paths produced by the CLI `keygen` stage."""

    client: str  # secret + public (stays with the data owner)
    server: str  # public + relin + galois (ships to the evaluator)


# -- ciphertext bundles (e.g. the per-class score vector) -----------------------

BUNDLE_MAGIC = b"CFB1"


def bundle_to_bytes(cts: list[Ciphertext], params: CkksParams) -> bytes:
    out = bytearray(BUNDLE_MAGIC)
    out += struct.pack("<H", len(cts))
    for ct in cts:
        blob = ciphertext_to_bytes(ct, params)
        out += struct.pack("<Q", len(blob))
        out += blob
    return bytes(out)


def bundle_from_bytes(buf: bytes, params: CkksParams) -> list[Ciphertext]:
    if buf[:4] != BUNDLE_MAGIC:
        raise SchemaError("not a ciphertext bundle")
    (count,) = struct.unpack_from("<H", buf, 4)
    off = 6
    cts = []
    for _ in range(count):
        (size,) = struct.unpack_from("<Q", buf, off)
        off += 8
        cts.append(ciphertext_from_bytes(buf[off : off + size], params))
        off += size
    return cts
