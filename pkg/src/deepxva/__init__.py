"""Multi-layer BSDE engine for portfolio valuation adjustments.

Layers: (1) clean values, (2) quantile-regression initial margin,
(3) ColVA / CVA / DVA / MVA, (4) FVA — each trained as a forward-shot
BSDE on simulated paths of a structural-default market model, with
measure-tilted simulation for the credit-sensitive layers and nested
Monte Carlo references for verification.
"""

import ctypes as _ctypes

__version__ = "0.1.0"


def _tune_allocator() -> None:
    """Keep large buffers on the heap instead of mmap round-trips.

    The tape sweeps allocate and free many MB-sized arrays per training
    step; with glibc's default mmap threshold each one page-faults on
    every step, which dominates runtime on small VMs.
    """
    try:
        libc = _ctypes.CDLL("libc.so.6")
        libc.mallopt(-3, 1 << 30)  # M_MMAP_THRESHOLD
        libc.mallopt(-1, 1 << 30)  # M_TRIM_THRESHOLD
    except (OSError, AttributeError):
        pass


_tune_allocator()
