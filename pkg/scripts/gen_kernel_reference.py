"""Regenerate the frozen high-precision reference for the correction kernel.

The reference value for a pair (zL, zU) is computed by 50-digit quadrature
of the truncated standard normal:

    ref = -E[Z | zL < Z < zU]
        = -(integral of t*phi(t)) / (integral of phi(t))  over (zL, zU)

which is an arithmetic route entirely independent of the package's
closed-form kernel.  The grid covers all ordered integer pairs in [-8, 8],
half-infinite intervals at each grid point, the doubly infinite case, and a
few extreme same-sign pairs.

Usage: python scripts/gen_kernel_reference.py > src/enrichest/data/kernel_reference.json
"""

import json
import sys

import mpmath as mp

mp.mp.dps = 50


def reference(z_lo, z_hi):
    lo = mp.mpf(z_lo) if z_lo != "-inf" else mp.mpf("-inf")
    hi = mp.mpf(z_hi) if z_hi != "inf" else mp.mpf("inf")
    # factor out the density at the support point nearest the origin so the
    # integrand is O(1); the factor cancels in the ratio and the quadrature
    # keeps full relative accuracy even for far-tail supports
    if lo > 0:
        anchor = lo
    elif hi < 0:
        anchor = hi
    else:
        anchor = mp.mpf(0)

    def g(t):
        return mp.exp((anchor * anchor - t * t) / 2)

    num = mp.quad(lambda t: t * g(t), [lo, hi])
    den = mp.quad(g, [lo, hi])
    return -num / den


def main():
    grid = list(range(-8, 9))
    pairs = []
    for i, a in enumerate(grid):
        for b in grid[i + 1 :]:
            pairs.append((a, b))
        pairs.append((a, "inf"))
        pairs.append(("-inf", a))
    pairs.append(("-inf", "inf"))
    # extreme same-sign pairs exercising the Mills-ratio branch
    pairs.extend([(10, 12), (-12, -10), (20, 25), (-25, -20), (30, 38), (-38, -30)])

    rows = []
    for z_lo, z_hi in pairs:
        if z_lo == "-inf" and z_hi == "inf":
            val = mp.mpf(0)
        else:
            val = reference(z_lo, z_hi)
        rows.append([str(z_lo), str(z_hi), float(val)])
    json.dump(rows, sys.stdout)


if __name__ == "__main__":
    main()
