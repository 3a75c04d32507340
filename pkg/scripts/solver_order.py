"""Empirical convergence of the first- and third-order solvers against an
analytic data-prediction ODE solution (polynomial-in-log-SNR oracle).

    python scripts/solver_order.py
"""
import math

import numpy as np
import torch

from panodiff import sampling as Sa
from panodiff.schedule import make_schedule

sched = make_schedule()
coefs = [0.3, -0.2, 0.05, 0.01]
s, t = 900, 20


def g(lam):
    return sum(c * lam ** k for k, c in enumerate(coefs))


def antideriv(lam):
    tot = sum(c * sum((-1) ** j * math.factorial(k) / math.factorial(k - j) * lam ** (k - j) for j in range(k + 1))
              for k, c in enumerate(coefs))
    return math.exp(lam) * tot


x_s = torch.tensor([0.7], dtype=torch.float64)
_, sig_s, lam_s = sched.coeffs(s)
_, sig_t, lam_t = sched.coeffs(t)
exact = (sig_t / sig_s) * x_s + sig_t * (antideriv(lam_t) - antideriv(lam_s))
oracle = lambda x, m, tt: (g(sched.lambda_at(tt)) * torch.ones_like(x), None)

for order in (1, 3):
    prev = None
    print(f"order {order}")
    for n in (2, 4, 8, 16, 32, 64):
        grid = [s] + [sched.timestep_for_lambda(v) for v in np.linspace(lam_s, lam_t, n + 1)[1:-1]] + [t]
        st = Sa.SolverState(x_s.clone(), None, s, sched)
        for tn in grid[1:]:
            if order == 3:
                st = Sa.dpm_third_step(st, oracle, tn)
            else:
                st = Sa.dpm_first_step(st, oracle(st.x, None, st.t)[0], None, tn)
        err = (st.x - exact).abs().item()
        rate = "" if prev is None else f"  observed order {math.log2(prev / err):.2f}"
        print(f"  steps {n:3d}  error {err:.3e}{rate}")
        prev = err
