"""Independent reference implementations used to check the fast paths.

Everything here is deliberately written as plain scalar loops with no code
shared with the package.
"""

import math

import numpy as np


def brute_force_meanfield_step(q, image, unary, params):
    """One mean-field update over all pixel pairs, scalar arithmetic."""
    h, w = image.shape
    out = np.zeros((h, w, 2))
    for i in range(h):
        for j in range(w):
            for lab in (0, 1):
                msg = 0.0
                for a in range(h):
                    for b in range(w):
                        if (a, b) == (i, j):
                            continue
                        d2 = (i - a) ** 2 + (j - b) ** 2
                        kg = math.exp(-d2 / (2 * params.gaussian_sdims**2))
                        kb = math.exp(
                            -d2 / (2 * params.bilateral_sdims**2)
                            - (image[i, j] - image[a, b]) ** 2
                            / (2 * params.bilateral_schan**2)
                        )
                        msg += (
                            params.gaussian_compat * kg + params.bilateral_compat * kb
                        ) * q[a, b, 1 - lab]
                out[i, j, lab] = math.exp(-unary[i, j, lab] - msg)
            out[i, j] /= out[i, j].sum()
    return out
