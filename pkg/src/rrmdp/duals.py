"""Inner minimizations over a single next-state distribution.

For a nominal distribution ``mu0`` and a value vector ``V`` the regularized
problem is ``inf_mu E_mu[V] + lam * D(mu || mu0)``. The TV and KL versions have
closed forms, chi-square and a user-supplied conjugate need a 1-D search over
a dual variable alpha. The constrained (uncertainty-ball) duals used by the
baselines live here too, along with primal brute-force solvers that are used
to certify every dual.

Divergence conventions: ``TV(mu, mu0) = 0.5 * ||mu - mu0||_1``,
``KL(mu || mu0) = sum mu log(mu / mu0)`` and
``chi2(mu || mu0) = sum (mu - mu0)^2 / mu0``, i.e. f(x) = |x-1|/2, x log x and
(x-1)^2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import linprog
from scipy.special import logsumexp

INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0
ORACLE_MAX_SUPPORT = 12


@dataclass(frozen=True)
class DualResult:
    value: float
    minimizer: Optional[np.ndarray] = None
    alpha_star: Optional[float] = None
    evaluations: int = 0


@dataclass(frozen=True)
class AlphaSearchConfig:
    grid_points: int = 256
    refine_tolerance: float = 1e-9
    refine_max_iters: int = 200

    def __post_init__(self):
        if self.grid_points < 2:
            raise ValueError("grid_points must be at least 2")
        if not self.refine_tolerance > 0:
            raise ValueError("refine_tolerance must be positive")
        if self.refine_max_iters < 0:
            raise ValueError("refine_max_iters must be non-negative")


DEFAULT_SEARCH = AlphaSearchConfig()


@dataclass(frozen=True)
class Conjugate:
    """Convex conjugate f*(t) of an f-divergence generator.

    ``fn`` is vectorized. ``t_max`` is the right end of its effective domain
    (f* is +inf beyond it); the alpha search never probes past it.
    """

    fn: Callable[[np.ndarray], np.ndarray]
    t_max: float = math.inf
    name: str = "custom"

    def __call__(self, t):
        return self.fn(np.asarray(t, dtype=float))


def _kl_conj(t):
    return np.exp(t - 1.0)


def _chi2_conj(t):
    return np.where(t >= -2.0, t + 0.25 * t * t, -1.0)


def _tv_conj(t):
    # the tiny slack keeps the domain endpoint itself finite under rounding
    return np.where(t <= 0.5 + 1e-12, np.maximum(t, -0.5), np.inf)


KL_CONJUGATE = Conjugate(_kl_conj, name="KL")
CHI2_CONJUGATE = Conjugate(_chi2_conj, name="Chi2")
TV_CONJUGATE = Conjugate(_tv_conj, t_max=0.5, name="TV")
CONJUGATES = {"KL": KL_CONJUGATE, "Chi2": CHI2_CONJUGATE, "TV": TV_CONJUGATE}


def _check_inputs(mu0, V):
    mu0 = np.asarray(mu0, dtype=float)
    V = np.asarray(V, dtype=float)
    if mu0.ndim != 1 or mu0.shape != V.shape:
        raise ValueError("mu0 and V must be 1-D arrays of equal length")
    if np.any(mu0 < 0) or abs(mu0.sum() - 1.0) > 1e-9:
        raise ValueError("mu0 must be a probability vector")
    if not np.all(np.isfinite(V)):
        raise ValueError("V must be finite")
    return mu0, V


def _check_lambda(lam):
    if not (lam > 0) or not math.isfinite(lam):
        raise ValueError(f"lambda must be a positive finite real, got {lam}")


# ---------------------------------------------------------------------------
# scalar search


def grid_refine_maximize(objective, lo, hi, cfg: AlphaSearchConfig = DEFAULT_SEARCH):
    """Maximize column-wise objectives over per-column brackets.

    ``objective(A)`` takes an (n, m) or (n, 1) array of alpha values and returns
    the (n, m) objective values, column j being the j-th scalar problem. A
    (n, 1) argument means every column is probed at the same alphas, which lets
    callers share work across columns. ``lo`` and ``hi`` are scalars or (m,)
    arrays. Returns (alpha_star, value, evaluations) with (m,) arrays.

    A uniform grid over the shared bracket is scanned first; each column is then
    refined by golden-section search in the two grid cells around its best point.
    """
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    if np.any(hi < lo):
        raise ValueError("empty search bracket")
    n = cfg.grid_points
    shared = lo.size == 1 and hi.size == 1
    if shared:
        grid = np.linspace(lo[0], hi[0], n)[:, None]
        if lo[0] == hi[0]:
            vals = objective(grid[:1])
            return np.full(vals.shape[1], lo[0]), vals[0].copy(), 1
        grid_vals = objective(grid)
        grid = np.broadcast_to(grid, grid_vals.shape)
    else:
        t = np.linspace(0.0, 1.0, n)[:, None]
        grid = lo[None, :] + t * (hi - lo)[None, :]
        grid_vals = objective(grid)
    m = grid_vals.shape[1]
    cols = np.arange(m)
    j = np.argmax(grid_vals, axis=0)
    best_alpha = grid[j, cols].copy()
    best_val = grid_vals[j, cols].copy()
    evals = n

    a = grid[np.maximum(j - 1, 0), cols].copy()
    b = grid[np.minimum(j + 1, n - 1), cols].copy()
    if cfg.refine_max_iters == 0 or np.all(b - a <= cfg.refine_tolerance):
        return best_alpha, best_val, evals
    c = b - INV_PHI * (b - a)
    d = a + INV_PHI * (b - a)
    fc = objective(c[None, :])[0]
    fd = objective(d[None, :])[0]
    evals += 2
    for _ in range(cfg.refine_max_iters):
        if np.all(b - a <= cfg.refine_tolerance):
            break
        left = fc >= fd
        # keep the better interior point, probe one new point per column
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = b - INV_PHI * (b - a)
        new_d = a + INV_PHI * (b - a)
        probe = np.where(left, new_c, new_d)
        fp = objective(probe[None, :])[0]
        evals += 1
        d, fd, c, fc = (np.where(left, c, new_d), np.where(left, fc, fp),
                        np.where(left, new_c, d), np.where(left, fp, fd))
    for x, fx in ((c, fc), (d, fd)):
        better = fx > best_val
        best_alpha = np.where(better, x, best_alpha)
        best_val = np.where(better, fx, best_val)
    return best_alpha, best_val, evals


def _scalar_search(fn, lo, hi, cfg):
    """Maximize a scalar-valued vectorized function fn(alphas) -> values."""
    alpha, value, evals = grid_refine_maximize(lambda A: fn(A[:, 0])[:, None], lo, hi, cfg)
    return float(alpha[0]), float(value[0]), evals


# ---------------------------------------------------------------------------
# regularized duals


def tv_dual(mu0, V, lam) -> DualResult:
    """``E_mu0[min(V, V_min + lam)]``."""
    mu0, V = _check_inputs(mu0, V)
    _check_lambda(lam)
    alpha = V.min() + lam
    return DualResult(float(mu0 @ np.minimum(V, alpha)), alpha_star=float(alpha), evaluations=1)


def kl_dual(mu0, V, lam) -> DualResult:
    """``-lam log E_mu0[exp(-V/lam)]`` evaluated with a V_min shift.

    The minimizer is the exponential tilt mu*(s) ~ mu0(s) exp(-V(s)/lam).
    """
    mu0, V = _check_inputs(mu0, V)
    _check_lambda(lam)
    vmin = V.min()
    with np.errstate(divide="ignore"):
        log_w = np.log(mu0) - (V - vmin) / lam
    log_z = logsumexp(log_w)
    minimizer = np.exp(log_w - log_z)
    return DualResult(float(vmin - lam * log_z), minimizer=minimizer, evaluations=1)


def chi2_objective(mu0, V, lam, alphas):
    """``E[V]_a - Var[V]_a / (4 lam)`` for each alpha in ``alphas``."""
    clipped = np.minimum(V[None, :], np.asarray(alphas, dtype=float)[:, None])
    mean = clipped @ mu0
    second = (clipped * clipped) @ mu0
    return mean - (second - mean * mean) / (4.0 * lam)


def chi2_dual(mu0, V, lam, cfg: AlphaSearchConfig = DEFAULT_SEARCH) -> DualResult:
    """Chi-square dual via grid + golden-section search over alpha in [V_min, V_max]."""
    mu0, V = _check_inputs(mu0, V)
    _check_lambda(lam)
    alpha, value, evals = _scalar_search(lambda a: chi2_objective(mu0, V, lam, a), V.min(), V.max(), cfg)
    return DualResult(value, alpha_star=alpha, evaluations=evals)


def generic_bracket(vmin, vmax, lam, conjugate: Conjugate):
    """Search bracket for the generic dual: [V_min - lam, V_max + lam] cut to f*'s domain."""
    lo = vmin - lam
    hi = vmax + lam
    if math.isfinite(conjugate.t_max):
        hi = min(hi, vmin + lam * conjugate.t_max)
    return lo, hi


def _raise_nonfinite(values, alphas):
    bad = ~np.isfinite(values)
    if np.any(bad):
        idx = np.nonzero(bad)
        a = np.asarray(alphas)
        a = a[idx[0][0]] if a.ndim == 1 else a[idx[0][0], idx[1][0] if a.shape[1] > 1 else 0]
        raise ValueError(f"conjugate is not finite at alpha = {float(a)!r}")


def f_dual_generic(mu0, V, lam, conjugate: Conjugate, cfg: AlphaSearchConfig = DEFAULT_SEARCH) -> DualResult:
    """``sup_alpha -lam E_mu0[f*((alpha - V)/lam)] + alpha`` by grid + golden-section search."""
    mu0, V = _check_inputs(mu0, V)
    _check_lambda(lam)
    lo, hi = generic_bracket(V.min(), V.max(), lam, conjugate)

    def objective(alphas):
        vals = conjugate((alphas[:, None] - V[None, :]) / lam)
        _raise_nonfinite(vals, alphas)
        return -lam * (vals @ mu0) + alphas

    alpha, value, evals = _scalar_search(objective, lo, hi, cfg)
    return DualResult(value, alpha_star=alpha, evaluations=evals)


def regularized_dual(mu0, V, kind: str, lam, cfg: AlphaSearchConfig = DEFAULT_SEARCH,
                     conjugate: Optional[Conjugate] = None) -> DualResult:
    if kind == "TV":
        return tv_dual(mu0, V, lam)
    if kind == "KL":
        return kl_dual(mu0, V, lam)
    if kind == "Chi2":
        return chi2_dual(mu0, V, lam, cfg)
    if kind == "GenericF":
        if conjugate is None:
            raise ValueError("GenericF needs a conjugate")
        return f_dual_generic(mu0, V, lam, conjugate, cfg)
    raise ValueError(f"unknown divergence {kind!r}")


# ---------------------------------------------------------------------------
# constrained (uncertainty ball) duals


def drmdp_tv_dual(mu0, V, rho, cfg: AlphaSearchConfig = DEFAULT_SEARCH) -> DualResult:
    """Worst case over ``{mu : TV(mu, mu0) <= rho}``:
    ``max_{alpha in [V_min, V_max]} E[V]_alpha - rho (alpha - V_min)``."""
    mu0, V = _check_inputs(mu0, V)
    if not 0 <= rho < 1:
        raise ValueError(f"rho must lie in [0, 1), got {rho}")
    vmin = V.min()

    def objective(alphas):
        return np.minimum(V[None, :], alphas[:, None]) @ mu0 - rho * (alphas - vmin)

    alpha, value, evals = _scalar_search(objective, vmin, V.max(), cfg)
    return DualResult(value, alpha_star=alpha, evaluations=evals)


KL_ALPHA_MIN = 1e-6


def kl_ball_objective(mu0, V, rho, alphas):
    """``-a log E_mu0 exp(-V/a) - a rho`` with the V_min shift, for each a."""
    alphas = np.asarray(alphas, dtype=float)
    vmin = V.min()
    with np.errstate(divide="ignore"):
        log_mu0 = np.log(mu0)
    log_e = logsumexp(log_mu0[None, :] - (V - vmin)[None, :] / alphas[:, None], axis=1)
    return vmin - alphas * log_e - alphas * rho


def drmdp_kl_dual(mu0, V, rho, cfg: AlphaSearchConfig = DEFAULT_SEARCH,
                  alpha_max: Optional[float] = None) -> DualResult:
    """Worst case over ``{mu : KL(mu || mu0) <= rho}``:
    ``sup_{alpha > 0} -alpha log E exp(-V/alpha) - alpha rho``.

    The search runs over ``[1e-6, alpha_max]``; by default ``alpha_max`` is
    ``max(V_max, 1e-6) / rho``, which always contains the maximizer since the
    objective is below ``E[V] - alpha rho``.
    """
    mu0, V = _check_inputs(mu0, V)
    if not rho > 0:
        raise ValueError(f"rho must be positive, got {rho}")
    if alpha_max is None:
        alpha_max = max(V.max(), KL_ALPHA_MIN) / rho
    alpha, value, evals = _scalar_search(lambda a: kl_ball_objective(mu0, V, rho, a),
                                         KL_ALPHA_MIN, max(alpha_max, KL_ALPHA_MIN), cfg)
    return DualResult(value, alpha_star=alpha, evaluations=evals)


# ---------------------------------------------------------------------------
# primal brute force


def divergence(mu, mu0, kind: str):
    """Row-wise divergence D(mu || mu0) for arrays of shape (..., S)."""
    mu = np.asarray(mu, dtype=float)
    mu0 = np.asarray(mu0, dtype=float)
    if kind == "TV":
        return 0.5 * np.abs(mu - mu0).sum(axis=-1)
    if kind == "KL":
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(mu > 0, mu * (np.log(mu) - np.log(mu0)), 0.0)
        return terms.sum(axis=-1)
    if kind == "Chi2":
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(mu0 > 0, (mu - mu0) ** 2 / mu0, np.where(mu > 0, np.inf, 0.0))
        return terms.sum(axis=-1)
    raise ValueError(f"no primal divergence for {kind!r}")


def project_simplex(Y):
    """Euclidean projection of each row of Y onto the probability simplex."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    n, S = Y.shape
    U = -np.sort(-Y, axis=1)
    css = np.cumsum(U, axis=1) - 1.0
    idx = np.arange(1, S + 1)
    cond = U - css / idx > 0
    r = S - 1 - np.argmax(cond[:, ::-1], axis=1)
    tau = css[np.arange(n), r] / (r + 1)
    return np.maximum(Y - tau[:, None], 0.0)


def simplex_grid(S: int, resolution: float) -> np.ndarray:
    """All points of the simplex in R^S whose coordinates are multiples of ``resolution``."""
    m = int(round(1.0 / resolution))
    if S == 1:
        return np.ones((1, 1))
    if S == 2:
        a = np.arange(m + 1) / m
        return np.stack([a, 1 - a], axis=1)
    if S == 3:
        i, j = np.triu_indices(m + 1)
        # i + (j - i) + (m - j) = m
        pts = np.stack([i, j - i, m - j], axis=1) / m
        return pts
    raise ValueError("exhaustive simplex grids are only built for S <= 3")


def _subgradient(MU0, V, lam, kind, iters):
    """Projected subgradient on the simplex, step 1/sqrt(t) scaled by the gradient size."""
    mu = MU0.copy()
    support = MU0 > 0
    avg = np.zeros_like(mu)
    best = mu.copy()
    best_val = (mu * V).sum(axis=1) + lam * divergence(mu, MU0, kind)
    for t in range(1, iters + 1):
        if kind == "TV":
            g = V + lam[:, None] * 0.5 * np.sign(mu - MU0)
        else:
            # chi-square is infinite off the support of mu0, so iterates stay on it
            g = V + lam[:, None] * 2.0 * (mu - MU0) / np.where(support, MU0, 1.0)
        scale = np.maximum(np.abs(g).max(axis=1, keepdims=True), 1.0)
        mu = project_simplex(mu - g / (scale * math.sqrt(t)))
        if kind == "Chi2":
            mu = np.where(support, mu, 0.0)
            mu /= mu.sum(axis=1, keepdims=True)
        avg += (mu - avg) / t
        val = (mu * V).sum(axis=1) + lam * divergence(mu, MU0, kind)
        better = val < best_val
        best[better] = mu[better]
        best_val = np.where(better, val, best_val)
    avg_val = (avg * V).sum(axis=1) + lam * divergence(avg, MU0, kind)
    use_avg = avg_val <= best_val
    return np.where(use_avg[:, None], avg, best), np.where(use_avg, avg_val, best_val)


def _chi2_waterfill(mu0, V, lam):
    """Exact chi-square primal minimizer from the KKT conditions.

    mu(s) = mu0(s) * max(0, 1 + (nu - V(s)) / (2 lam)) with nu set by bisection
    so that mu sums to one.
    """
    def mass(nu):
        return (mu0 * np.maximum(0.0, 1.0 + (nu - V) / (2 * lam))).sum()

    lo, hi = V.min() - 2 * lam, V.max()
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if mass(mid) < 1.0:
            lo = mid
        else:
            hi = mid
    mu = mu0 * np.maximum(0.0, 1.0 + (0.5 * (lo + hi) - V) / (2 * lam))
    return mu / mu.sum()


def _tv_lp(mu0, V, lam):
    """Exact TV primal as an LP over (mu, t) with t >= |mu - mu0|."""
    S = mu0.size
    c = np.concatenate([V, 0.5 * lam * np.ones(S)])
    eye = np.eye(S)
    A_ub = np.block([[eye, -eye], [-eye, -eye]])
    b_ub = np.concatenate([mu0, -mu0])
    A_eq = np.concatenate([np.ones(S), np.zeros(S)])[None, :]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=[(0, None)] * (2 * S),
                  method="highs")
    if res.status != 0:
        return None
    return project_simplex(res.x[:S])[0]


def brute_force_regularized_inf_batch(MU0, V, lam, kind: str, iters: int = 10_000,
                                      grid_resolution: float = 1e-3):
    """Primal ``inf_mu E_mu V + lam D(mu||mu0)`` for a batch of same-size instances.

    Returns (values (n,), minimizers (n, S)). KL uses the analytic exponential
    tilt. TV and chi-square run projected subgradient descent and keep the best
    of it, an exact solve (LP for TV, KKT water-filling for chi-square) and,
    when S <= 3, an exhaustive simplex grid.
    """
    MU0 = np.atleast_2d(np.asarray(MU0, dtype=float))
    V = np.atleast_2d(np.asarray(V, dtype=float))
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (MU0.shape[0],)).copy()
    n, S = MU0.shape
    if S > ORACLE_MAX_SUPPORT:
        raise ValueError(f"oracle supports at most {ORACLE_MAX_SUPPORT} states, got {S}")
    if np.any(lam <= 0):
        raise ValueError("lambda must be positive")

    if kind == "KL":
        vmin = V.min(axis=1, keepdims=True)
        with np.errstate(divide="ignore"):
            log_w = np.log(MU0) - (V - vmin) / lam[:, None]
        mu = np.exp(log_w - logsumexp(log_w, axis=1, keepdims=True))
        return (mu * V).sum(axis=1) + lam * divergence(mu, MU0, "KL"), mu
    if kind not in ("TV", "Chi2"):
        raise ValueError(f"oracle does not handle {kind!r}")

    mu, val = _subgradient(MU0, V, lam, kind, iters)
    candidates = [(mu, val)]
    exact = np.empty_like(MU0)
    for k in range(n):
        if kind == "Chi2":
            exact[k] = _chi2_waterfill(MU0[k], V[k], lam[k])
        else:
            x = _tv_lp(MU0[k], V[k], lam[k])
            exact[k] = MU0[k] if x is None else x
    candidates.append((exact, (exact * V).sum(axis=1) + lam * divergence(exact, MU0, kind)))
    if S <= 3:
        pts = simplex_grid(S, grid_resolution)
        gmu = np.empty_like(MU0)
        gval = np.empty(n)
        for k in range(n):
            vals = pts @ V[k] + lam[k] * divergence(pts, MU0[k], kind)
            j = int(np.argmin(vals))
            gmu[k], gval[k] = pts[j], vals[j]
        candidates.append((gmu, gval))
    best_mu, best_val = candidates[0]
    for cmu, cval in candidates[1:]:
        better = cval < best_val
        best_mu = np.where(better[:, None], cmu, best_mu)
        best_val = np.where(better, cval, best_val)
    return best_val, best_mu


def brute_force_regularized_inf(mu0, V, lam, kind: str, iters: int = 10_000) -> DualResult:
    mu0, V = _check_inputs(mu0, V)
    _check_lambda(lam)
    if np.count_nonzero(mu0) > ORACLE_MAX_SUPPORT or mu0.size > ORACLE_MAX_SUPPORT:
        raise ValueError(f"oracle supports at most {ORACLE_MAX_SUPPORT} states")
    vals, mus = brute_force_regularized_inf_batch(mu0[None], V[None], lam, kind, iters=iters)
    return DualResult(float(vals[0]), minimizer=mus[0], evaluations=iters)


def brute_force_tv_ball_inf(mu0, V, rho, resolution: float = 1e-4) -> DualResult:
    """``inf E_mu V`` over ``{mu : TV(mu, mu0) <= rho}``: an LP, plus a grid scan when S <= 3."""
    mu0, V = _check_inputs(mu0, V)
    S = mu0.size
    eye = np.eye(S)
    c = np.concatenate([V, np.zeros(S)])
    A_ub = np.vstack([np.hstack([eye, -eye]), np.hstack([-eye, -eye]),
                      np.concatenate([np.zeros(S), 0.5 * np.ones(S)])[None, :]])
    b_ub = np.concatenate([mu0, -mu0, [rho]])
    A_eq = np.concatenate([np.ones(S), np.zeros(S)])[None, :]
    res = linprog(c, A_ub=A_ub, b_ub=b_ub, A_eq=A_eq, b_eq=[1.0], bounds=[(0, None)] * (2 * S),
                  method="highs")
    best_val, best_mu = float(res.fun), res.x[:S]
    if S <= 3:
        pts = simplex_grid(S, resolution)
        feas = divergence(pts, mu0, "TV") <= rho + 1e-12
        vals = np.where(feas, pts @ V, np.inf)
        j = int(np.argmin(vals))
        if vals[j] < best_val:
            best_val, best_mu = float(vals[j]), pts[j]
    return DualResult(best_val, minimizer=best_mu)


def brute_force_kl_ball_inf(mu0, V, rho, tol: float = 1e-13) -> DualResult:
    """``inf E_mu V`` over ``{mu : KL(mu||mu0) <= rho}`` on the exponential-tilt family.

    The minimizer is mu_t ~ mu0 exp(-t V) with t >= 0 chosen by bisection so that
    the KL constraint is tight (or t = inf when the whole ball reaches the
    minimum of V).
    """
    mu0, V = _check_inputs(mu0, V)
    vmin = V.min()
    on_min = mu0[np.isclose(V, vmin, rtol=0, atol=1e-15)].sum()
    if -math.log(on_min) <= rho:
        mu = np.where(np.isclose(V, vmin, rtol=0, atol=1e-15), mu0, 0.0) / on_min
        return DualResult(float(vmin), minimizer=mu)

    def tilt(t):
        with np.errstate(divide="ignore"):
            log_w = np.log(mu0) - t * (V - vmin)
        return np.exp(log_w - logsumexp(log_w))

    lo, hi = 0.0, 1.0
    while divergence(tilt(hi), mu0, "KL") < rho:
        hi *= 2.0
    while hi - lo > tol * max(1.0, hi):
        mid = 0.5 * (lo + hi)
        if divergence(tilt(mid), mu0, "KL") < rho:
            lo = mid
        else:
            hi = mid
    mu = tilt(lo)
    return DualResult(float(mu @ V), minimizer=mu)


# ---------------------------------------------------------------------------
# certification suite


def random_instances(trials: int, seed: int, max_states: int = 8, max_h: int = 5,
                     lam_range=(0.05, 50.0)):
    """Random (mu0, V, lam) triples: |S| uniform in {2..max_states}, mu0 ~ Dirichlet(1),
    V uniform in [0, H] with H uniform in {1..max_h}, lam log-uniform."""
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(trials):
        S = int(rng.integers(2, max_states + 1))
        mu0 = rng.dirichlet(np.ones(S))
        H = int(rng.integers(1, max_h + 1))
        V = rng.uniform(0.0, H, size=S)
        lam = float(math.exp(rng.uniform(math.log(lam_range[0]), math.log(lam_range[1]))))
        out.append((mu0, V, lam))
    return out


def certification_suite(instances, cfg: AlphaSearchConfig = DEFAULT_SEARCH, iters: int = 10_000):
    """Compare every dual with the primal oracle and the generic-conjugate dual.

    Returns ``{"oracle": {kind: max_abs_err}, "generic": {kind: max_abs_err},
    "bounds": max violation of V_min <= value <= E_mu0 V}``.
    """
    specialized = {"TV": tv_dual, "KL": kl_dual, "Chi2": lambda m, v, l: chi2_dual(m, v, l, cfg)}
    closed = {k: np.empty(len(instances)) for k in specialized}
    oracle_err = {k: 0.0 for k in specialized}
    generic_err = {k: 0.0 for k in specialized}
    bound_violation = 0.0
    for idx, (mu0, V, lam) in enumerate(instances):
        for kind, fn in specialized.items():
            val = fn(mu0, V, lam).value
            closed[kind][idx] = val
            gen = f_dual_generic(mu0, V, lam, CONJUGATES[kind], cfg).value
            generic_err[kind] = max(generic_err[kind], abs(gen - val))
            bound_violation = max(bound_violation, V.min() - val, val - mu0 @ V)
    by_size = {}
    for idx, (mu0, _, _) in enumerate(instances):
        by_size.setdefault(mu0.size, []).append(idx)
    for kind in specialized:
        for S, idxs in by_size.items():
            MU0 = np.stack([instances[i][0] for i in idxs])
            VV = np.stack([instances[i][1] for i in idxs])
            lam = np.array([instances[i][2] for i in idxs])
            vals, _ = brute_force_regularized_inf_batch(MU0, VV, lam, kind, iters=iters)
            err = np.abs(vals - closed[kind][idxs]).max()
            oracle_err[kind] = max(oracle_err[kind], float(err))
    return {"oracle": oracle_err, "generic": generic_err, "bounds": float(bound_violation)}


DUALCHECK_TOLERANCE = {"TV": 1e-4, "KL": 1e-9, "Chi2": 1e-4}
GENERIC_TOLERANCE = 1e-6
