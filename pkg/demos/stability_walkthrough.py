"""Classify a few solutions of -Lap u = H(u) and test the stability inequality on them.

Run with ``python demos/stability_walkthrough.py``.
"""

from __future__ import annotations

import numpy as np

from riemstab import geometry as geo
from riemstab import system as S
from riemstab.discretization import Grid, TestFunctionFamily, assemble_laplacian
from riemstab.stability import classify_stability, poincare_check, stability_inequality_check


def main():
    torus = geo.make_chart("flat_torus")
    grid = Grid.uniform(torus, 64)
    lap = assemble_laplacian(grid, torus.metric_field())
    ac = S.allen_cahn_scalar()

    print("Allen-Cahn constants on the flat torus")
    for value in (1.0, 0.0, -1.0):
        u = np.full((1,) + grid.shape, value)
        res = classify_stability(lap, ac, u)
        print(f"  u = {value:+.0f}: {res.verdict:13s} mu = {res.mu:+.6f}")

    # a nonconstant stable solution needs boundary data: the positive solution on a Dirichlet square
    box = geo.make_chart("flat_box", upper=8.0)
    bgrid = Grid.uniform(box, 65)
    blap = assemble_laplacian(bgrid, box.metric_field(), bc="dirichlet")
    u0 = np.full((1,) + bgrid.shape, 0.5)
    u0[:, bgrid.boundary_mask] = 0.0
    u, rep = S.newton_solve(blap, ac, S.gradient_flow(blap, ac, u0, 0.2, 300))
    res = classify_stability(blap, ac, u)
    print(f"\nDirichlet square [0, 8]^2: Newton residual {rep.residual:.1e}, max u = {u.max():.4f}")
    print(f"  {res.verdict}, mu = {res.mu:.4f}, certificate residual {res.certificate.residual:.1e}")

    fam = list(TestFunctionFamily(seed=0, count=200).fields(bgrid, 1))
    ineq = stability_inequality_check(blap, ac, u, fam)
    poin = poincare_check(blap, ac, u, fam[:50])
    print(f"  stability inequality: min margin {ineq.min_margin:.4f} over {len(fam)} bumps")
    print(f"  Poincare inequality:  min margin {poin.min_margin:.2e} over 50 bumps")


if __name__ == "__main__":
    main()
