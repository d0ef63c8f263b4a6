"""Fast numerical self-checks behind ``orthosep check``.

Each check returns ``(name, passed, detail)``; output is deterministic.
"""
from __future__ import annotations

import itertools
import math

import numpy as np

from .inr.siren import build_model
from .inr.training import loss_and_grad
from .kinetics import AIF, TimeGrid, ToftsParams, fit_tofts, population_aif, tofts_constant_aif_closed_form, tofts_forward
from .projection import ProjectorSpec, dense_projector, decompose_residual, gram_factorize, project_parallel
from .stats import exact_p_value


def _rel(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def check_projector(n_instances: int = 10, seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        X = rng.normal(size=(200, 7))
        e = rng.normal(size=200)
        pinv = gram_factorize(X, ProjectorSpec.pinv())
        d = decompose_residual(X, pinv, e)
        worst = max(worst,
                    _rel(project_parallel(X, pinv, d.r_par), d.r_par),
                    float(np.linalg.norm(X.T @ d.r_perp) / np.linalg.norm(X.T @ e)),
                    abs(e @ e - d.r_par @ d.r_par - d.r_perp @ d.r_perp) / (e @ e))
        ridge = gram_factorize(X, ProjectorSpec.ridge())
        dr = decompose_residual(X, ridge, e)
        rhs = 1e-3 * np.linalg.solve(X.T @ X + 1e-3 * np.eye(7), X.T @ e)
        worst = max(worst, _rel(X.T @ dr.r_perp, rhs))
        dense = np.abs(dense_projector(X) @ e - dr.r_par).max()
        worst = max(worst, dense)
    return "projector identities", worst <= 1e-9, f"max deviation {worst:.2e}"


def check_gradient(seed: int = 0, h: float = 1e-6):
    rng = np.random.default_rng(seed)
    model = build_model(3, n_fourier=4, hidden=6, n_hidden=1, seed=seed)
    X = rng.random((32, 3))
    y = rng.random(32)
    fact = gram_factorize(X, ProjectorSpec.ridge())

    def loss():
        return loss_and_grad(model, X, y, fact, 1.0)[0].total

    _, grads = loss_and_grad(model, X, y, fact, 1.0)
    worst = 0.0
    for p, g in zip(model.params, grads):
        fd = np.zeros_like(p)
        for i in np.ndindex(p.shape):
            old = p[i]
            p[i] = old + h
            lp = loss()
            p[i] = old - h
            lm = loss()
            p[i] = old
            fd[i] = (lp - lm) / (2 * h)
        worst = max(worst, _rel(g, fd))
    return "loss gradient vs finite differences", worst <= 1e-4, f"max relative error {worst:.2e}"


def check_tofts(seed: int = 0):
    grid = TimeGrid.uniform(240.0, 1.0)
    aif = population_aif(grid)
    p0 = ToftsParams(0.0, 0.3, 0.04)
    exact_zero = float(np.abs(tofts_forward(p0, aif) - 0.04 * aif.cp).max())
    p = ToftsParams(0.01, 0.3, 0.05)
    const = AIF(np.full(len(grid), 2.0), grid)
    ref = tofts_constant_aif_closed_form(p, 2.0, grid.t[1:])
    closed = float(np.max(np.abs(tofts_forward(p, const)[1:] - ref) / ref))
    rng = np.random.default_rng(seed)
    fit_err = 0.0
    for _ in range(5):
        truth = ToftsParams(rng.uniform(0.002, 0.02), rng.uniform(0.1, 0.6), rng.uniform(0.01, 0.1))
        fit = fit_tofts(tofts_forward(truth, aif), aif)
        fit_err = max(fit_err, float(np.max(np.abs(fit.params.as_array() / truth.as_array() - 1))))
    ok = exact_zero <= 1e-12 and closed <= 1e-3 and fit_err <= 0.02
    return "Tofts oracles", ok, f"Ktrans=0 {exact_zero:.1e}, closed form {closed:.1e}, fit {fit_err:.1e}"


def _brute_p(a, b) -> float:
    from scipy.stats import rankdata
    pooled = np.concatenate([a, b])
    ranks = rankdata(pooled)
    n1, n = len(a), len(pooled)
    mean = n1 * (n + 1) / 2
    obs = abs(ranks[:n1].sum() - mean)
    hits = sum(abs(ranks[list(c)].sum() - mean) >= obs - 1e-9 for c in itertools.combinations(range(n), n1))
    return hits / math.comb(n, n1)


def check_rank_sum(seed: int = 0):
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n1, n2 in [(3, 3), (4, 6), (5, 5), (2, 9)]:
        a = np.round(rng.normal(size=n1), 1)
        b = np.round(rng.normal(size=n2) + 0.5, 1)
        worst = max(worst, abs(exact_p_value(a, b) - _brute_p(a, b)))
    return "Mann-Whitney exact vs enumeration", worst <= 1e-12, f"max |dp| {worst:.1e}"


ALL_CHECKS = (check_projector, check_gradient, check_tofts, check_rank_sum)


def run_all():
    return [check() for check in ALL_CHECKS]
