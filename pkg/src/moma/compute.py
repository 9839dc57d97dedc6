"""BLAS thread control.

The GEMMs at desk scale are small enough that OpenBLAS threading costs
more than it buys (and parallel sweep workers would thrash each other), so
compute loops pin BLAS to one thread when threadpoolctl is importable.
"""

from __future__ import annotations

import contextlib

try:
    from threadpoolctl import threadpool_limits

    def single_thread_blas():
        return threadpool_limits(limits=1)

except ImportError:  # pragma: no cover - depends on environment

    @contextlib.contextmanager
    def single_thread_blas():
        yield None
