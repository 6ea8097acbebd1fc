"""Small shared helpers: BLAS pinning for determinism, file hashing."""

from __future__ import annotations

import hashlib
from contextlib import contextmanager


@contextmanager
def single_threaded_blas():
    """Pin BLAS pools to one thread: bit-identical results for any requested
    worker count. Worker threads are reserved for embarrassingly parallel
    work (independent finite-difference samples), never for accumulation."""
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        yield
        return
    with threadpool_limits(limits=1):
        yield


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
