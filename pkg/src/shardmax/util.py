"""Small shared helpers: seeded RNG streams, numeric guards, hashing."""

from __future__ import annotations

import hashlib

import numpy as np

from .errors import NumericError

DTYPES = {"f32": np.float32, "f64": np.float64}


def rng_from(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for stream `key` of run `seed`.

    Every consumer of randomness derives its own stream from the run seed
    plus a structural key, so adding or removing one consumer never shifts
    the draws of another.
    """
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=key))


def ensure_finite(value, what: str):
    """Raise NumericError if `value` (scalar or array) contains NaN/Inf."""
    arr = np.asarray(value)
    if not np.isfinite(arr).all():
        raise NumericError(f"non-finite values in {what}")
    return value


def resolve_dtype(precision: str) -> np.dtype:
    try:
        return np.dtype(DTYPES[precision])
    except KeyError:
        raise ValueError(f"precision must be one of {sorted(DTYPES)}, got {precision!r}") from None


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
