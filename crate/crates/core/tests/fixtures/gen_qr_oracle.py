"""Freeze reference optima for small penalized quantile-regression problems.

Each instance is solved with a generic conic solver (Clarabel through cvxpy)
at tight tolerances. Rerun with `python3 gen_qr_oracle.py > qr_oracle.json`.
"""
import json

import cvxpy as cp
import numpy as np


def diff_matrix(order, p):
    d = np.eye(p)
    for _ in range(order):
        d = d[1:] - d[:-1]
    return d


def main():
    rng = np.random.default_rng(20240611)
    out = []
    for k in range(100):
        n = int(rng.integers(8, 31))
        p = int(rng.integers(2, 6))
        lam = 0.0 if k % 2 == 0 else 1.0
        tau = float(np.round(rng.uniform(0.05, 0.95), 3))
        x = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
        beta_true = rng.normal(size=p)
        y = x @ beta_true + rng.standard_t(3, size=n)
        order = 2 if p >= 3 else 1
        d = diff_matrix(order, p)
        b = cp.Variable(p)
        r = y - x @ b
        loss = cp.sum(cp.maximum(tau * r, (tau - 1) * r))
        obj = loss + (lam / 2) * cp.sum_squares(d @ b)
        prob = cp.Problem(cp.Minimize(obj))
        prob.solve(
            solver=cp.CLARABEL,
            tol_gap_abs=1e-13,
            tol_gap_rel=1e-13,
            tol_feas=1e-13,
            max_iter=500,
        )
        bv = b.value
        rv = y - x @ bv
        exact = float(np.sum(np.maximum(tau * rv, (tau - 1) * rv)) + lam / 2 * np.sum((d @ bv) ** 2))
        out.append(
            {
                "n": n,
                "p": p,
                "tau": tau,
                "lambda": lam,
                "penalty_order": order,
                "x": [float(v) for v in x.ravel()],
                "y": [float(v) for v in y],
                "objective": exact,
            }
        )
    print(json.dumps(out))


if __name__ == "__main__":
    main()
