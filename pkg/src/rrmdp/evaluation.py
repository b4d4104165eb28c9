"""Ground-truth values on tabular environments.

``exact_value`` is plain backward induction under the nominal kernel. The
robust regularized value solves, for every stage and every latent factor i,
the population problem ``w_{h,i} = inf_mu E_mu V_{h+1} + lam D(mu || mu0_{h,i})``
through the certified duals, then ``Q_h = <phi, theta_h + w_h>``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .duals import AlphaSearchConfig, brute_force_regularized_inf, chi2_dual, divergence, kl_dual, tv_dual
from .mdp_core import DivergenceSpec, Policy, TabularMDP, simulate

# ground truth uses a finer alpha search than the solvers
EVAL_SEARCH = AlphaSearchConfig(grid_points=512, refine_tolerance=1e-12, refine_max_iters=300)


@dataclass(frozen=True)
class ValueTable:
    values: np.ndarray
    q_values: np.ndarray
    kind: str
    meta: dict = field(default_factory=dict)

    @property
    def H(self) -> int:
        return self.values.shape[0]

    def initial(self, initial_dist) -> float:
        return float(np.asarray(initial_dist) @ self.values[0])


def exact_value(env: TabularMDP, policy: Policy) -> ValueTable:
    H, S, A = env.H, env.n_states, env.n_actions
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    for h in range(H - 1, -1, -1):
        Q[h] = env.rewards[h] + env.kernel[h] @ V[h + 1]
        V[h] = (policy.probs[h] * Q[h]).sum(axis=1)
    return ValueTable(V[:H], Q, "nominal")


def optimal_value(env: TabularMDP) -> ValueTable:
    """Non-robust optimal value by backward induction."""
    H, S, A = env.H, env.n_states, env.n_actions
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    for h in range(H - 1, -1, -1):
        Q[h] = env.rewards[h] + env.kernel[h] @ V[h + 1]
        V[h] = Q[h].max(axis=1)
    return ValueTable(V[:H], Q, "nominal-optimal")


def _factor_duals(mu0_h: np.ndarray, V_next: np.ndarray, div: DivergenceSpec, cfg) -> np.ndarray:
    if div.kind == "TV":
        return np.array([tv_dual(m, V_next, div.lam).value for m in mu0_h])
    if div.kind == "KL":
        return np.array([kl_dual(m, V_next, div.lam).value for m in mu0_h])
    if div.kind == "Chi2":
        return np.array([chi2_dual(m, V_next, div.lam, cfg).value for m in mu0_h])
    raise ValueError(f"robust evaluation supports TV, KL and Chi2 only, got {div.kind!r}")


def _require_factors(env):
    mu = getattr(env, "nominal_factors", None)
    if mu is None:
        raise ValueError("robust evaluation needs a linear MDP with nominal factors")
    return mu


def _robust_dp(env, div: DivergenceSpec, policy=None, cfg=EVAL_SEARCH):
    mu = _require_factors(env)
    if div.kind not in ("TV", "KL", "Chi2"):
        raise ValueError(f"robust evaluation supports TV, KL and Chi2 only, got {div.kind!r}")
    H, S, A = env.H, env.n_states, env.n_actions
    table = env.features.table
    V = np.zeros((H + 1, S))
    Q = np.zeros((H, S, A))
    W = np.zeros((H, env.d))
    for h in range(H - 1, -1, -1):
        W[h] = _factor_duals(mu[h], V[h + 1], div, cfg)
        Q[h] = table @ (env.theta[h] + W[h])
        if policy is None:
            V[h] = Q[h].max(axis=1)
        else:
            V[h] = (policy.probs[h] * Q[h]).sum(axis=1)
    return V[:H], Q, W


def robust_regularized_value(env: TabularMDP, policy: Policy, div: DivergenceSpec,
                             cfg: AlphaSearchConfig = EVAL_SEARCH) -> ValueTable:
    V, Q, W = _robust_dp(env, div, policy, cfg)
    return ValueTable(V, Q, "robust", {"divergence": div.kind, "lambda": div.lam, "w": W})


def optimal_robust_value(env: TabularMDP, div: DivergenceSpec, cfg: AlphaSearchConfig = EVAL_SEARCH):
    """Returns (V^{*,lam} table, greedy optimal robust policy with lowest-id ties)."""
    V, Q, W = _robust_dp(env, div, None, cfg)
    policy = Policy.deterministic(Q.argmax(axis=2), env.n_actions)
    return ValueTable(V, Q, "robust-optimal", {"divergence": div.kind, "lambda": div.lam, "w": W}), policy


def suboptimality(env: TabularMDP, policy: Policy, div: DivergenceSpec,
                  cfg: AlphaSearchConfig = EVAL_SEARCH, optimal: ValueTable = None) -> float:
    """``E_{s ~ init}[V_1^{*,lam}(s) - V_1^{pi,lam}(s)]``."""
    if optimal is None:
        optimal, _ = optimal_robust_value(env, div, cfg)
    value = robust_regularized_value(env, policy, div, cfg)
    return float(env.initial_dist @ (optimal.values[0] - value.values[0]))


def worst_case_factors(env: TabularMDP, V_next, div: DivergenceSpec, h: int, iters: int = 10_000):
    """Primal minimizers of every stage-h factor problem and their divergences from the nominal factor."""
    mu = _require_factors(env)
    mins, divs = [], []
    for m in mu[h]:
        res = brute_force_regularized_inf(m, V_next, div.lam, div.kind, iters=iters)
        mins.append(res.minimizer)
        divs.append(float(divergence(res.minimizer, m, div.kind)))
    return np.array(mins), np.array(divs)


def mc_return(env: TabularMDP, policy: Policy, n_episodes: int, seed: int):
    """Mean and standard error of de-normalized returns (mean rewards, no noise)."""
    if n_episodes < 1:
        raise ValueError("n_episodes must be at least 1")
    _, _, rewards, _ = simulate(env, policy, n_episodes, seed, reward_noise=0.0)
    returns = rewards.sum(axis=1) * env.reward_scale
    stderr = float(returns.std(ddof=1) / np.sqrt(n_episodes)) if n_episodes > 1 else 0.0
    return float(returns.mean()), stderr
