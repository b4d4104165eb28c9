"""Offline pessimistic value iteration with linear features.

All solvers share one backward loop: at stage h a ridge regression on the
stage-h samples estimates ``w_h``, and

    Q_h(s, a) = clip(<phi(s, a), theta_h + w_h> - Gamma_h(s, a), 0, H - h)

with ``Gamma_h(s, a) = beta * sum_i phi_i(s, a) sqrt((Lambda_h^-1)_ii)``
(0-indexed h, so the cap H - h equals H - h' + 1 for the 1-indexed stage
h' = h + 1). The greedy policy breaks ties toward the lowest action id.

What gets regressed depends on the method:

* PEVI: the next-stage value itself.
* R2PVI-TV: ``min(V, V_min + lam)``.
* R2PVI-KL: ``exp(-(V - V_min)/lam)``, then ``V_min - lam log(max(., floor))``.
* R2PVI-Chi2: ``[V]_a`` and ``[V]_a^2`` for every alpha, maximized per dimension.
* R2PVI-GenericF: ``f*((a - V)/lam)``, maximized per dimension.
* DRPVI (TV ball) and DRVI-L (KL ball): one 1-D dual search per dimension,
  with a regression for every probed alpha.

Rewards are known: ``theta`` is read from the environment, never estimated.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .duals import (DEFAULT_SEARCH, KL_ALPHA_MIN, AlphaSearchConfig, Conjugate, _raise_nonfinite,
                    generic_bracket, grid_refine_maximize)
from .mdp_core import DivergenceSpec, FeatureMap, OfflineDataset, Policy, TabularMDP

# cap on the number of (sample, alpha) target entries materialized at once
TARGET_CHUNK = 1 << 22


@dataclass(frozen=True)
class GramState:
    gram: np.ndarray
    gram_inv: np.ndarray
    gamma: float

    @property
    def H(self) -> int:
        return self.gram.shape[0]


class StageRegression:
    """Ridge regression on the samples of one stage.

    ``hat = Phi Lambda^-1`` (K x d), so the ridge solution for targets ``y`` is
    ``hat.T @ y``; per-dimension problems with their own targets only need
    the matching column of ``hat``.
    """

    def __init__(self, phi: np.ndarray, next_states: np.ndarray, gamma: float):
        if not gamma > 0:
            raise ValueError(f"gamma must be positive, got {gamma}")
        self.phi = phi
        self.next_states = next_states
        d = phi.shape[1]
        self.gram = phi.T @ phi + gamma * np.eye(d)
        factor = cho_factor(self.gram, lower=True)
        self.gram_inv = cho_solve(factor, np.eye(d))
        self.hat = cho_solve(factor, phi.T).T if phi.shape[0] else np.zeros((0, d))
        self.ridge_calls = 0

    @property
    def K(self) -> int:
        return self.phi.shape[0]

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    def ridge(self, y):
        """Closed-form ridge estimate for sample targets ``y`` (K,) or (K, n)."""
        y = np.asarray(y, dtype=float)
        self.ridge_calls += 1 if y.ndim == 1 else y.shape[1]
        return self.hat.T @ y

    def ridge_grid(self, target_fn, alphas):
        """(d, n) ridge estimates, column j regressing ``target_fn(alphas[j])``."""
        alphas = np.asarray(alphas, dtype=float)
        out = np.empty((self.d, alphas.size))
        step = max(1, TARGET_CHUNK // max(self.K, 1))
        for start in range(0, alphas.size, step):
            chunk = alphas[start:start + step]
            out[:, start:start + step] = self.ridge(target_fn(chunk))
        return out

    def ridge_columns(self, target_fn, alphas):
        """(d,) estimates where dimension i regresses ``target_fn(alphas[i])``."""
        alphas = np.asarray(alphas, dtype=float)
        self.ridge_calls += alphas.size
        return np.einsum("ki,ki->i", self.hat, target_fn(alphas))

    def residual(self, w, y) -> float:
        """Normal-equation residual ``||Lambda w - Phi^T y||_inf``."""
        return float(np.abs(self.gram @ w - self.phi.T @ np.asarray(y, dtype=float)).max(initial=0.0))


def stage_regressions(dataset: OfflineDataset, features: FeatureMap, gamma: float):
    return [StageRegression(features.table[dataset.states[:, h], dataset.actions[:, h]],
                            dataset.next_states[:, h], gamma) for h in range(dataset.H)]


def build_gram(dataset: OfflineDataset, features: FeatureMap, gamma: float) -> GramState:
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    regs = stage_regressions(dataset, features, gamma)
    return GramState(np.stack([r.gram for r in regs]), np.stack([r.gram_inv for r in regs]), float(gamma))


def pessimism_penalty(phi, gram_inv, beta: float):
    """``beta * sum_i phi_i sqrt((Lambda^-1)_ii)``; ``phi`` may carry leading batch axes."""
    if beta < 0:
        raise ValueError("beta must be non-negative")
    return beta * (np.asarray(phi) @ np.sqrt(np.diag(gram_inv)))


# ---------------------------------------------------------------------------
# estimators


def _next_values(stage: StageRegression, V_next, state_grid=None):
    V_next = np.asarray(V_next, dtype=float)
    if state_grid is not None and len(state_grid) == 0:
        raise ValueError("empty state grid")
    grid = V_next if state_grid is None else V_next[np.asarray(state_grid, dtype=int)]
    return V_next[stage.next_states], float(grid.min()), float(grid.max())


def estimate_w_plain(stage: StageRegression, V_next):
    y = np.asarray(V_next, dtype=float)[stage.next_states]
    return stage.ridge(y), y


def estimate_w_tv(stage: StageRegression, V_next, lam: float, state_grid=None):
    """Ridge regression of ``min(V_next(s'), min V_next + lam)``; returns (w, targets)."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    y, vmin, _ = _next_values(stage, V_next, state_grid)
    targets = np.minimum(y, vmin + lam)
    return stage.ridge(targets), targets


def _support_shift(stage: StageRegression, y, default: float):
    """Per-dimension min of ``y`` over the samples with a nonzero hat weight.

    Shifting dimension i's exponentials by this value keeps every weighted
    target in (0, 1], so none of them underflows to 0 at small temperatures.
    Zero-weight samples may sit below the shift; their exponents are clamped
    at 0, which leaves the regression unchanged since their weight is 0.
    """
    weighted = stage.hat != 0
    m = np.where(weighted, y[:, None], np.inf).min(axis=0, initial=np.inf)
    return np.where(np.isfinite(m), m, default)


def _shifted_exp_ridge(stage: StageRegression, y, shift, temps):
    """(d, n) ridge estimates of ``exp(-(y - shift_i)^+ / t_j)``, one regression per distinct shift."""
    temps = np.asarray(temps, dtype=float)
    out = np.empty((stage.d, temps.size))
    for m in np.unique(shift):
        dims = shift == m
        z = np.maximum(y - m, 0.0)
        out[dims] = stage.ridge_grid(lambda t: np.exp(-z[:, None] / t[None, :]), temps)[dims]
    return out


def estimate_w_kl(stage: StageRegression, V_next, lam: float, H: float, state_grid=None):
    """``V_min - lam log max(ridge(exp(-(V - V_min)/lam)), exp(-(H - V_min)/lam))``;
    returns (w, targets)."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    y, vmin, _ = _next_values(stage, V_next, state_grid)
    targets = np.exp(-(y - vmin) / lam)
    shift = _support_shift(stage, y, vmin)
    r = _shifted_exp_ridge(stage, y, shift, [lam])[:, 0]
    # log ridge(exp(-(V - V_min)/lam)) = -(shift - V_min)/lam + log r; the floor is
    # compared in log space since exp(-(H - V_min)/lam) may underflow
    with np.errstate(divide="ignore", invalid="ignore"):
        log_w = -(shift - vmin) / lam + np.log(np.maximum(r, 0.0))
    log_floor = -max(H - vmin, 0.0) / lam
    return vmin - lam * np.maximum(log_w, log_floor), targets


def estimate_w_chi2(stage: StageRegression, V_next, lam: float, H: float,
                    cfg: AlphaSearchConfig = DEFAULT_SEARCH, state_grid=None):
    """Per-dimension ``max_a E1 + (E1^2 - E2)/(4 lam)`` where E1, E2 are ridge
    estimates of ``[V]_a`` and ``[V]_a^2`` clipped to [0, H] and [0, H^2]."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    y, vmin, vmax = _next_values(stage, V_next, state_grid)
    if stage.K == 0:
        return np.zeros(stage.d), 0

    def objective(A):
        if A.shape[1] == 1:
            e1, e2 = _chi2_grid(stage, y, A[:, 0])
        else:
            a = A[0]
            c = np.minimum(y[:, None], a[None, :])
            e1 = stage.ridge_columns(lambda _: c, a)[None, :]
            e2 = stage.ridge_columns(lambda _: c * c, a)[None, :]
        e1 = np.clip(e1, 0.0, H)
        e2 = np.clip(e2, 0.0, H * H)
        return e1 + (e1 * e1 - e2) / (4.0 * lam)

    _, w, evals = grid_refine_maximize(objective, vmin, vmax, cfg)
    return w, evals


def _chi2_grid(stage: StageRegression, y, alphas):
    """Grid-phase moments: (n, d) estimates of E[V]_a and E[V^2]_a sharing one hat matrix."""
    n = alphas.size
    e1 = np.empty((stage.d, n))
    e2 = np.empty((stage.d, n))
    step = max(1, TARGET_CHUNK // max(2 * stage.K, 1))
    for start in range(0, n, step):
        c = np.minimum(y[:, None], alphas[None, start:start + step])
        both = stage.ridge(np.concatenate([c, c * c], axis=1))
        m = c.shape[1]
        e1[:, start:start + m] = both[:, :m]
        e2[:, start:start + m] = both[:, m:]
    return e1.T, e2.T


def estimate_w_generic(stage: StageRegression, V_next, lam: float, conjugate: Conjugate,
                       cfg: AlphaSearchConfig = DEFAULT_SEARCH, state_grid=None):
    """Per-dimension ``sup_a -lam ridge_i(f*((a - V)/lam)) + a`` over the widened bracket."""
    if not lam > 0:
        raise ValueError("lambda must be positive")
    y, vmin, vmax = _next_values(stage, V_next, state_grid)
    lo, hi = generic_bracket(vmin, vmax, lam, conjugate)

    def targets(alphas):
        t = conjugate((alphas[None, :] - y[:, None]) / lam)
        _raise_nonfinite(t.T, alphas)
        return t

    def objective(A):
        if A.shape[1] == 1:
            a = A[:, 0]
            r = stage.ridge_grid(targets, a).T
            return -lam * r + a[:, None]
        a = A[0]
        return (-lam * stage.ridge_columns(targets, a) + a)[None, :]

    _, w, evals = grid_refine_maximize(objective, lo, hi, cfg)
    return w, evals


def estimate_w_drpvi(stage: StageRegression, V_next, rho: float,
                     cfg: AlphaSearchConfig = DEFAULT_SEARCH, state_grid=None):
    """Per-dimension ``max_a ridge_i([V]_a) - rho (a - V_min)`` over [V_min, V_max]."""
    if not 0 <= rho < 1:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    y, vmin, vmax = _next_values(stage, V_next, state_grid)

    def targets(alphas):
        return np.minimum(y[:, None], alphas[None, :])

    def objective(A):
        if A.shape[1] == 1:
            a = A[:, 0]
            return stage.ridge_grid(targets, a).T - rho * (a[:, None] - vmin)
        a = A[0]
        return (stage.ridge_columns(targets, a) - rho * (a - vmin))[None, :]

    _, w, evals = grid_refine_maximize(objective, vmin, vmax, cfg)
    return w, evals


def estimate_w_drvi_l(stage: StageRegression, V_next, rho: float, H: float,
                      cfg: AlphaSearchConfig = DEFAULT_SEARCH, state_grid=None):
    """Per-dimension KL-ball dual with ridge-estimated inner expectations.

    For each alpha the inner expectation ``E exp(-(V - V_min)/alpha)`` is a ridge
    estimate normalized by the ridge estimate of the constant 1, clipped to
    ``[exp(-(H - V_min)/alpha), 1]``; the objective is
    ``V_min - alpha log(.) - alpha rho`` searched over ``[1e-6, H / rho]``.
    """
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    y, vmin, _ = _next_values(stage, V_next, state_grid)
    ones = stage.hat.sum(axis=0)
    norm = np.where(ones > 0, ones, 1.0)
    span = max(H - vmin, 0.0)
    shift = _support_shift(stage, y, vmin)

    def finish(r, a):
        # log of the normalized estimate of E exp(-(V - V_min)/a), clipped in log
        # space: exp(-span / a) underflows for small a
        with np.errstate(divide="ignore", invalid="ignore"):
            log_ratio = -(shift - vmin) / a + np.log(np.maximum(r / norm, 0.0))
        log_ratio = np.clip(log_ratio, -span / a, 0.0)
        return vmin - a * log_ratio - a * rho

    def objective(A):
        if A.shape[1] == 1:
            a = A[:, 0]
            return finish(_shifted_exp_ridge(stage, y, shift, a).T, a[:, None])
        a = A[0]
        z = np.maximum(y[:, None] - shift[None, :], 0.0)
        r = stage.ridge_columns(lambda t: np.exp(-z / t[None, :]), a)
        return finish(r, a)[None, :]

    _, w, evals = grid_refine_maximize(objective, KL_ALPHA_MIN, max(H / rho, KL_ALPHA_MIN), cfg)
    return w, evals


# ---------------------------------------------------------------------------
# backward loop


@dataclass
class SolverOutput:
    algo: str
    w_hat: np.ndarray
    q_tables: np.ndarray
    v_tables: np.ndarray
    policy: Policy
    beta: float
    gamma: float
    gram: GramState
    stage_ms: np.ndarray
    alpha_evals: np.ndarray
    targets: Optional[list] = None
    params: dict = field(default_factory=dict)

    @property
    def H(self) -> int:
        return self.w_hat.shape[0]

    @property
    def wallclock_ms(self) -> float:
        return float(self.stage_ms.sum())

    def to_csv(self, directory, prefix: str = "solver") -> dict:
        """Write ``<prefix>_q.csv`` (h,s,a,q_hat), ``<prefix>_w.csv`` (h,i,value) and
        ``<prefix>_diagnostics.csv`` (h,wallclock_ms,alpha_evals); stages are 1-indexed."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {k: directory / f"{prefix}_{k}.csv" for k in ("q", "w", "diagnostics")}
        H, S, A = self.q_tables.shape
        with open(paths["q"], "w") as f:
            f.write("h,s,a,q_hat\n")
            for h in range(H):
                for s in range(S):
                    for a in range(A):
                        f.write(f"{h + 1},{s},{a},{float(self.q_tables[h, s, a])!r}\n")
        with open(paths["w"], "w") as f:
            f.write("h,i,value\n")
            for h in range(H):
                for i, v in enumerate(self.w_hat[h]):
                    f.write(f"{h + 1},{i},{float(v)!r}\n")
        with open(paths["diagnostics"], "w") as f:
            f.write("h,wallclock_ms,alpha_evals\n")
            for h in range(H):
                f.write(f"{h + 1},{self.stage_ms[h]:.6f},{int(self.alpha_evals[h])}\n")
        return paths


def _backward(dataset: OfflineDataset, env: TabularMDP, beta: float, gamma: float, estimator, algo: str,
              params: dict) -> SolverOutput:
    if beta < 0:
        raise ValueError("beta must be non-negative")
    if not gamma > 0:
        raise ValueError(f"gamma must be positive, got {gamma}")
    if dataset.H != env.H:
        raise ValueError(f"dataset horizon {dataset.H} does not match environment horizon {env.H}")
    H, S, A, d = env.H, env.n_states, env.n_actions, env.d
    table = env.features.table
    w_hat = np.zeros((H, d))
    Q = np.zeros((H, S, A))
    V = np.zeros((H + 1, S))
    grams = np.zeros((H, d, d))
    gram_invs = np.zeros((H, d, d))
    stage_ms = np.zeros(H)
    evals = np.zeros(H, dtype=int)
    targets = [None] * H
    for h in range(H - 1, -1, -1):
        t0 = time.perf_counter()
        stage = StageRegression(table[dataset.states[:, h], dataset.actions[:, h]],
                                dataset.next_states[:, h], gamma)
        w, extra = estimator(stage, V[h + 1])
        if isinstance(extra, np.ndarray):
            targets[h] = extra
            evals[h] = 0
        else:
            evals[h] = int(extra)
        penalty = beta * (table @ np.sqrt(np.diag(stage.gram_inv)))
        # scalar cap: H - h for 0-indexed h, i.e. H - h' + 1 for 1-indexed h'
        Q[h] = np.clip(table @ (env.theta[h] + w) - penalty, 0.0, H - h)
        V[h] = Q[h].max(axis=1)
        stage_ms[h] = (time.perf_counter() - t0) * 1e3
        w_hat[h] = w
        grams[h] = stage.gram
        gram_invs[h] = stage.gram_inv
    policy = Policy.deterministic(Q.argmax(axis=2), A)
    return SolverOutput(algo=algo, w_hat=w_hat, q_tables=Q, v_tables=V[:H], policy=policy, beta=float(beta),
                        gamma=float(gamma), gram=GramState(grams, gram_invs, float(gamma)), stage_ms=stage_ms,
                        alpha_evals=evals, targets=targets, params=params)


def solve_pevi(dataset: OfflineDataset, env: TabularMDP, beta: float, gamma: float) -> SolverOutput:
    return _backward(dataset, env, beta, gamma, estimate_w_plain, "PEVI", {})


def solve_r2pvi(dataset: OfflineDataset, env: TabularMDP, divergence: DivergenceSpec, beta: float, gamma: float,
                cfg: AlphaSearchConfig = DEFAULT_SEARCH) -> SolverOutput:
    lam = divergence.lam
    H = env.H
    if divergence.kind == "TV":
        estimator = lambda st, v: estimate_w_tv(st, v, lam)
    elif divergence.kind == "KL":
        estimator = lambda st, v: estimate_w_kl(st, v, lam, H)
    elif divergence.kind == "Chi2":
        estimator = lambda st, v: estimate_w_chi2(st, v, lam, H, cfg)
    elif divergence.kind == "GenericF":
        estimator = lambda st, v: estimate_w_generic(st, v, lam, divergence.conjugate, cfg)
    else:
        raise ValueError(f"unknown divergence {divergence.kind!r}")
    return _backward(dataset, env, beta, gamma, estimator, f"R2PVI-{divergence.kind}",
                     {"divergence": divergence.kind, "lambda": lam})


def solve_drpvi(dataset: OfflineDataset, env: TabularMDP, rho: float, beta: float, gamma: float,
                cfg: AlphaSearchConfig = DEFAULT_SEARCH) -> SolverOutput:
    if not 0 <= rho < 1:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    return _backward(dataset, env, beta, gamma, lambda st, v: estimate_w_drpvi(st, v, rho, cfg), "DRPVI",
                     {"rho": rho})


def solve_drvi_l(dataset: OfflineDataset, env: TabularMDP, rho: float, beta: float, gamma: float,
                 cfg: AlphaSearchConfig = DEFAULT_SEARCH) -> SolverOutput:
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    H = env.H
    return _backward(dataset, env, beta, gamma, lambda st, v: estimate_w_drvi_l(st, v, rho, H, cfg), "DRVI-L",
                     {"rho": rho})


ALGORITHMS = ("PEVI", "R2PVI", "DRPVI", "DRVI-L")


def solve(algo: str, dataset: OfflineDataset, env: TabularMDP, beta: float, gamma: float,
          divergence: Optional[DivergenceSpec] = None, rho: Optional[float] = None,
          cfg: AlphaSearchConfig = DEFAULT_SEARCH) -> SolverOutput:
    """Dispatch by algorithm name."""
    if algo == "PEVI":
        return solve_pevi(dataset, env, beta, gamma)
    if algo == "R2PVI":
        if divergence is None:
            raise ValueError("R2PVI needs a divergence")
        return solve_r2pvi(dataset, env, divergence, beta, gamma, cfg)
    if algo == "DRPVI":
        return solve_drpvi(dataset, env, rho, beta, gamma, cfg)
    if algo == "DRVI-L":
        return solve_drvi_l(dataset, env, rho, beta, gamma, cfg)
    raise ValueError(f"unknown algorithm {algo!r}; expected one of {ALGORITHMS}")


# ---------------------------------------------------------------------------
# theoretical beta


def beta_recommendation(divergence: str, d: int, H: int, K: int, lam: float, delta: float) -> float:
    """Pessimism coefficient from the suboptimality analysis, per divergence."""
    if min(d, H, K, lam, delta) <= 0:
        raise ValueError("all arguments must be positive")
    if not 0 < delta < 1:
        raise ValueError("delta must lie in (0, 1)")
    if divergence == "TV":
        xi = 2.0 * math.log(1024.0 * H * math.sqrt(d) * K ** 2 / delta)
        return 16.0 * H * d * math.sqrt(xi)
    if divergence == "KL":
        if H / lam > 700:
            raise ValueError(f"H/lambda = {H / lam:.6g} > 700 overflows exp(H/lambda); pass beta explicitly")
        xi = math.log(1024.0 * d * lam ** 2 * K ** 3 * H / delta)
        return 16.0 * d * lam * math.exp(H / lam) * math.sqrt(H / lam + xi)
    if divergence == "Chi2":
        xi = math.log(192.0 * K ** 5 * H ** 6 * d ** 3 * (1.0 + H / (2.0 * lam)) ** 3 / delta)
        return 8.0 * d * H * (1.0 + 3.0 * H / (4.0 * lam)) * math.sqrt(xi)
    raise ValueError(f"no beta formula for {divergence!r}")
