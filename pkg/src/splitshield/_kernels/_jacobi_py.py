"""Pure-numpy one-sided Jacobi sweep, the fallback for the compiled kernel.

Both implementations share the same semantics: one cyclic sweep over all
column pairs of the working matrix (stored transposed, one column per row),
rotating a pair whenever the off-diagonal Gram entry exceeds ``thresh``.
"""

import math

import numpy as np


def jacobi_sweep(bt: np.ndarray, vt: np.ndarray, thresh: float) -> int:
    """Run one cyclic sweep in place; return the number of rotations applied.

    bt: (q, p) array, row i holds column i of the p x q working matrix.
    vt: (q, q) array accumulating the right rotations, same row layout.
    """
    q = bt.shape[0]
    rotations = 0
    for i in range(q - 1):
        for j in range(i + 1, q):
            x = bt[i]
            y = bt[j]
            apq = float(x @ y)
            if abs(apq) <= thresh:
                continue
            app = float(x @ x)
            aqq = float(y @ y)
            zeta = (aqq - app) / (2.0 * apq)
            t = math.copysign(1.0, zeta) / (abs(zeta) + math.sqrt(1.0 + zeta * zeta))
            c = 1.0 / math.sqrt(1.0 + t * t)
            s = c * t
            new_i = c * x - s * y
            new_j = s * x + c * y
            bt[i] = new_i
            bt[j] = new_j
            xv = c * vt[i] - s * vt[j]
            yv = s * vt[i] + c * vt[j]
            vt[i] = xv
            vt[j] = yv
            rotations += 1
    return rotations
