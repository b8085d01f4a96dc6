"""Hot-kernel selection: compiled extension when built, numpy fallback otherwise."""

from ._jacobi_py import jacobi_sweep as jacobi_sweep_py

try:
    from ._jacobi import jacobi_sweep as jacobi_sweep_compiled
except ImportError:
    jacobi_sweep_compiled = None

USING_COMPILED = jacobi_sweep_compiled is not None
jacobi_sweep = jacobi_sweep_compiled if USING_COMPILED else jacobi_sweep_py

__all__ = ["jacobi_sweep", "jacobi_sweep_py", "jacobi_sweep_compiled", "USING_COMPILED"]
