"""Environment builders: a five-state simulated linear MDP, a discretized
American put option, and the two-state hard-instance family.

Every builder records its parameters in ``env.params`` so that
:func:`write_descriptor` / :func:`read_descriptor` can rebuild it exactly.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .mdp_core import (FeatureMap, InvalidEnvironmentError, OfflineDataset, Policy, TabularLinearMDP,
                       TabularMDP, collect_dataset, read_keyvalue, validate_linear_mdp, write_keyvalue)

# ---------------------------------------------------------------------------
# simulated linear MDP
#
# States x1..x5 are ids 0..4; x4 (id 3) is the absorbing fail state and x5
# (id 4) the absorbing goal state. Actions are {-1, 1}^4 (16 ids). Features
# live in R^6:
#   x1: g(a) e0 + (1 - g(a)) e1, g(a) = 1/2 + delta_env <xi, a> / ||xi||_1
#   x2: e2, x3: e3, x4: e4, x5: e5
# Factor 0 ("advance") sends 0.9 to the goal and 0.1 to the fail state,
# factor 1 ("detour") leads to x2, x2 and x3 lead to x3, x4 and x5 are
# absorbing. Rewards: r(x1, a) = 0.5 (1 - g(a)), r(x2) = r(x3) = ||xi||_1,
# r(x5) = 1, r(x4) = 0. Advancing pays off in the nominal model, detouring
# is safer once stage-1 transitions leak toward the fail state.

SIM_STATES = ("x1", "x2", "x3", "x4", "x5")
SIM_FAIL = 3
SIM_GOAL = 4
SIM_ADVANCE_GOAL = 0.9
SIM_DETOUR_REWARD = 0.5
SIM_ACTIONS = np.array(list(itertools.product((-1.0, 1.0), repeat=4)))


@dataclass(frozen=True)
class SimLinearMDPParams:
    xi: tuple = (0.12, 0.09, 0.06, 0.03)
    delta_env: float = 0.3
    q: float = 0.0
    H: int = 3


def default_xi(norm1: float = 0.3) -> tuple:
    """A fixed xi direction rescaled to the requested l1 norm."""
    base = np.array([0.4, 0.3, 0.2, 0.1])
    return tuple(float(x) for x in norm1 * base)


def build_simulated_linear_mdp(p: SimLinearMDPParams = SimLinearMDPParams()) -> TabularLinearMDP:
    xi = np.asarray(p.xi, dtype=float)
    if xi.shape != (4,):
        raise ValueError(f"xi must have 4 entries, got {xi.shape}")
    if p.H < 1:
        raise ValueError("H must be positive")
    norm1 = float(np.abs(xi).sum())
    if norm1 > 1:
        raise ValueError(f"||xi||_1 = {norm1} makes r(x2) = ||xi||_1 exceed 1")
    if not 0 <= p.delta_env <= 0.5:
        raise ValueError(f"delta_env = {p.delta_env} pushes g(a) outside [0, 1]; need 0 <= delta_env <= 1/2")
    if not 0 <= p.q < 1:
        raise ValueError(f"q must lie in [0, 1), got {p.q}")

    nA, S, d = len(SIM_ACTIONS), 5, 6
    if norm1 > 0:
        g = 0.5 + p.delta_env * (SIM_ACTIONS @ xi) / norm1
    else:
        g = np.full(nA, 0.5)
    phi = np.zeros((S, nA, d))
    phi[0, :, 0] = g
    phi[0, :, 1] = 1.0 - g
    for s in range(1, S):
        phi[s, :, s + 1] = 1.0

    mu = np.zeros((d, S))
    mu[0, SIM_GOAL] = SIM_ADVANCE_GOAL
    mu[0, SIM_FAIL] = 1.0 - SIM_ADVANCE_GOAL
    mu[1, 1] = 1.0
    mu[2, 2] = 1.0
    mu[3, 2] = 1.0
    mu[4, SIM_FAIL] = 1.0
    mu[5, SIM_GOAL] = 1.0
    factors = np.repeat(mu[None], p.H, axis=0)
    theta = np.tile([0.0, SIM_DETOUR_REWARD, norm1, norm1, 0.0, 1.0], (p.H, 1))
    init = np.zeros(S)
    init[0] = 1.0
    params = {"builder": "simulated_linear_mdp", "xi": list(xi), "delta_env": p.delta_env, "q": 0.0, "H": p.H}
    env = TabularLinearMDP(features=FeatureMap(phi), nominal_factors=factors, theta=theta,
                           initial_dist=init, name="simulated_linear_mdp", params=params)
    _require_valid(env)
    if p.q > 0:
        env = perturb_simulated_linear_mdp(env, p.q)
    return env


def perturb_simulated_linear_mdp(env: TabularLinearMDP, q: float) -> TabularLinearMDP:
    """Mix every stage-1 factor toward the fail state: (1 - q) mu + q delta_fail."""
    if not 0 <= q < 1:
        raise ValueError(f"q must lie in [0, 1), got {q}")
    mu = np.array(env.nominal_factors)
    fail = np.zeros(env.n_states)
    fail[SIM_FAIL] = 1.0
    mu[0] = (1.0 - q) * mu[0] + q * fail[None, :]
    params = dict(env.params)
    params["q"] = 1.0 - (1.0 - params.get("q", 0.0)) * (1.0 - q)
    return TabularLinearMDP(features=env.features, nominal_factors=mu, theta=env.theta,
                            initial_dist=env.initial_dist, reward_noise=env.reward_noise,
                            reward_scale=env.reward_scale, name=env.name, params=params)


# ---------------------------------------------------------------------------
# American put option
#
# Prices are s_init * up^u * down^v for u + v <= H; one extra absorbing
# terminal state follows an exercise. Action 0 exercises, action 1 holds.
# Features have d + 3 coordinates [psi_1..psi_d, payoff, slack, terminal]:
#   hold:     [psi(s), 0, 1 - sum psi(s), 0]
#   exercise: [0, payoff(s)/R, 0, 1 - payoff(s)/R]
#   terminal: e_terminal
# theta puts weight 1 on the payoff coordinate, so exercising earns
# payoff/R and everything else earns 0.

EXERCISE, HOLD = 0, 1


@dataclass(frozen=True)
class AmericanPutParams:
    p0: float = 0.5
    d: int = 30
    H: int = 20
    strike: float = 100.0
    up_factor: float = 1.02
    down_factor: float = 0.98
    s_init: float = 100.0
    anchor_start: float = 80.0
    anchor_span: float = 60.0


def american_put_grid(p: AmericanPutParams):
    """(prices, up_index, down_index) for all (u, v) with u + v <= H."""
    pairs = [(u, v) for n in range(p.H + 1) for u in range(n + 1) for v in [n - u]]
    index = {uv: k for k, uv in enumerate(pairs)}
    prices = np.array([p.s_init * p.up_factor ** u * p.down_factor ** v for u, v in pairs])
    up = np.array([index.get((u + 1, v), k) for k, (u, v) in enumerate(pairs)])
    down = np.array([index.get((u, v + 1), k) for k, (u, v) in enumerate(pairs)])
    return prices, up, down


def triangular_basis(prices, anchors, width):
    return np.maximum(0.0, 1.0 - np.abs(np.asarray(prices)[:, None] - anchors[None, :]) / width)


def build_american_put(p: AmericanPutParams = AmericanPutParams()) -> TabularMDP:
    if p.d <= 0:
        raise ValueError(f"number of anchors d must be positive, got {p.d}")
    if p.H < 1:
        raise ValueError("H must be positive")
    if not 0 < p.p0 < 1:
        raise ValueError(f"p0 must lie in (0, 1), got {p.p0}")
    if p.anchor_span <= 0:
        raise ValueError("anchor_span must be positive")
    prices, up, down = american_put_grid(p)
    G = prices.size
    S = G + 1
    term = G
    width = p.anchor_span / p.d
    anchors = p.anchor_start + width * np.arange(p.d)
    payoff = np.maximum(0.0, p.strike - prices)
    r_norm = float(payoff.max()) if payoff.max() > 0 else 1.0

    D = p.d + 3
    i_pay, i_slack, i_term = p.d, p.d + 1, p.d + 2
    phi = np.zeros((S, 2, D))
    psi = triangular_basis(prices, anchors, width)
    phi[:G, HOLD, :p.d] = psi
    phi[:G, HOLD, i_slack] = 1.0 - psi.sum(axis=1)
    phi[:G, EXERCISE, i_pay] = payoff / r_norm
    phi[:G, EXERCISE, i_term] = 1.0 - payoff / r_norm
    phi[term, :, i_term] = 1.0
    # rounding in the triangular basis can leave a ~1e-16 negative slack
    phi[:, :, i_slack] = np.maximum(phi[:, :, i_slack], 0.0)

    kernel = np.zeros((p.H, S, 2, S))
    rows = np.arange(G)
    kernel[:, rows, HOLD, up] += p.p0
    kernel[:, rows, HOLD, down] += 1.0 - p.p0
    kernel[:, rows, EXERCISE, term] = 1.0
    kernel[:, term, :, term] = 1.0
    theta = np.zeros((p.H, D))
    theta[:, i_pay] = 1.0
    init = np.zeros(S)
    init[0] = 1.0
    params = {"builder": "american_put", **{k: getattr(p, k) for k in p.__dataclass_fields__}}
    env = TabularMDP(features=FeatureMap(phi), kernel=kernel, theta=theta, initial_dist=init,
                     reward_scale=r_norm, name="american_put", params=params)
    _require_valid(env)
    return env


def american_put_prices(env: TabularMDP) -> np.ndarray:
    """Price of every non-terminal state of an American put environment."""
    fields_ = AmericanPutParams.__dataclass_fields__
    p = AmericanPutParams(**{k: env.params[k] for k in fields_})
    return american_put_grid(p)[0]


def exercise_behavior_policy(env: TabularMDP) -> Policy:
    """Always exercise (action 0)."""
    return Policy.deterministic(np.full((env.H, env.n_states), EXERCISE), env.n_actions)


# ---------------------------------------------------------------------------
# hard instance
#
# Two states s1 (id 0) and s2 (id 1, absorbing, zero reward); actions are
# {0, 1}^d with bit i of the action id giving a_i. Features have d + 2
# coordinates: phi(s1, a) = (a/d, 1 - sum(a)/d, 0), phi(s2, a) = e_{d+2}.


@dataclass(frozen=True)
class HardInstanceParams:
    xi: np.ndarray
    K: int
    lam: float
    divergence: str = "TV"
    H: int = field(init=False)
    d: int = field(init=False)

    def __post_init__(self):
        xi = np.array(self.xi, dtype=float)
        if xi.ndim != 2 or not np.all(np.isin(xi, (-1.0, 1.0))):
            raise ValueError("xi must be an H x d matrix with entries in {-1, 1}")
        xi.setflags(write=False)
        object.__setattr__(self, "xi", xi)
        object.__setattr__(self, "H", xi.shape[0])
        object.__setattr__(self, "d", xi.shape[1])
        if self.divergence not in ("TV", "KL", "Chi2"):
            raise ValueError(f"hard instance supports TV, KL, Chi2; got {self.divergence!r}")
        if not self.lam > 0:
            raise ValueError("lambda must be positive")

    @property
    def min_K(self) -> float:
        return self.d ** 3 * self.H ** 2 / (2.0 * self.lam ** 2)

    @property
    def delta_gap(self) -> float:
        return self.d ** 1.5 / math.sqrt(2.0 * self.K)

    @property
    def epsilon(self) -> float:
        base = 1.0 - 2.0 ** (-1.0 / self.H)
        scale = self.d ** 1.5 / (self.lam * math.sqrt(2.0 * self.K))
        if self.divergence == "TV":
            return base
        if self.divergence == "KL":
            return min(base, scale / 64.0)
        return min(base, scale / 8.0)


def random_sign_pattern(H: int, d: int, seed: int) -> np.ndarray:
    return np.random.default_rng(seed).choice([-1.0, 1.0], size=(H, d))


def hard_instance_actions(d: int) -> np.ndarray:
    """(2^d, d) 0/1 matrix; row b is the action with bits of b."""
    ids = np.arange(2 ** d)
    return ((ids[:, None] >> np.arange(d)[None, :]) & 1).astype(float)


def action_id(bits) -> int:
    bits = np.asarray(bits, dtype=int)
    return int((bits << np.arange(bits.size)).sum())


def check_hard_instance(p: HardInstanceParams) -> None:
    if not p.K > p.min_K:
        raise ValueError(f"K = {p.K} is too small; need K > d^3 H^2 / (2 lambda^2) = {p.min_K:.6g}")


def build_hard_instance_env(p: HardInstanceParams) -> TabularLinearMDP:
    check_hard_instance(p)
    H, d = p.H, p.d
    acts = hard_instance_actions(d)
    nA = acts.shape[0]
    D = d + 2
    phi = np.zeros((2, nA, D))
    phi[0, :, :d] = acts / d
    phi[0, :, d] = 1.0 - acts.sum(axis=1) / d
    phi[1, :, d + 1] = 1.0
    eps = p.epsilon
    mu = np.zeros((H, D, 2))
    mu[:, :d + 1, 0] = 1.0 - eps
    mu[:, :d + 1, 1] = eps
    mu[:, d + 1, 1] = 1.0
    theta = np.zeros((H, D))
    theta[:, :d] = p.delta_gap * (p.xi + 1.0) / 2.0
    theta[:, d] = p.delta_gap / 2.0
    init = np.array([(d + 1.0) / (d + 2.0), 1.0 / (d + 2.0)])
    params = {"builder": "hard_instance", "xi": p.xi.astype(int).ravel().tolist(), "H": H, "d": d,
              "K": p.K, "lam": p.lam, "divergence": p.divergence}
    env = TabularLinearMDP(features=FeatureMap(phi), nominal_factors=mu, theta=theta, initial_dist=init,
                           reward_noise=1.0, name="hard_instance", params=params)
    _require_valid(env)
    return env


def hard_instance_behavior(env: TabularMDP) -> Policy:
    """Uniform over the d + 1 actions {e_1, ..., e_d, 0}."""
    d = env.d - 2
    probs = np.zeros((env.H, env.n_states, env.n_actions))
    allowed = [0] + [1 << i for i in range(d)]
    probs[:, :, allowed] = 1.0 / len(allowed)
    return Policy(probs, kind="explicit-stochastic")


def build_hard_instance(p: HardInstanceParams, seed: int):
    """Returns (env, behavior policy, dataset of p.K trajectories)."""
    env = build_hard_instance_env(p)
    behavior = hard_instance_behavior(env)
    data = collect_dataset(env, behavior, p.K, seed)
    return env, behavior, data


def hard_instance_optimal_actions(xi) -> np.ndarray:
    """Action id per stage with bits (1 + xi_h) / 2."""
    xi = np.asarray(xi)
    return np.array([action_id((1 + row) // 2) for row in xi.astype(int)])


def hard_instance_closed_form(env: TabularLinearMDP, policy: Policy) -> np.ndarray:
    """``(delta/2d) sum_{j>=h} (1-eps)^{j-h} (d + sum_i xi_ji E^pi a_ji)`` at s1, per stage h."""
    H = env.H
    d = env.d - 2
    xi = np.asarray(env.params["xi"], dtype=float).reshape(H, d)
    acts = hard_instance_actions(d)
    eps = float(env.nominal_factors[0, 0, 1])
    delta = 2.0 * float(env.theta[0, d])
    mean_a = policy.probs[:, 0, :] @ acts  # (H, d)
    terms = d + (xi * mean_a).sum(axis=1)
    out = np.zeros(H)
    acc = 0.0
    for h in range(H - 1, -1, -1):
        acc = terms[h] + (1.0 - eps) * acc
        out[h] = delta / (2.0 * d) * acc
    return out


def hard_instance_slack(env: TabularLinearMDP, kind: str) -> np.ndarray:
    """Width f_h of the interval [closed_form - f_h, closed_form] for KL and chi-square."""
    H = env.H
    lam = float(env.params["lam"])
    eps = float(env.nominal_factors[0, 0, 1])
    steps = H - 1 - np.arange(H)  # H - h for 1-indexed h
    if kind == "TV":
        return np.zeros(H)
    if kind == "KL":
        return steps * lam * eps * (math.e - 1.0)
    if kind == "Chi2":
        return steps * lam * eps * (1.0 - eps) / 4.0
    raise ValueError(kind)


# ---------------------------------------------------------------------------
# shared


def uniform_behavior_policy(env: TabularMDP) -> Policy:
    if env.name == "hard_instance":
        return hard_instance_behavior(env)
    return Policy.uniform(env.H, env.n_states, env.n_actions)


def _require_valid(env):
    report = validate_linear_mdp(env)
    if not report.ok:
        raise InvalidEnvironmentError(report)


def build_environment(spec: dict) -> TabularMDP:
    """Build an environment from a ``{"builder": name, **params}`` mapping."""
    spec = dict(spec)
    builder = spec.pop("builder")
    if builder == "simulated_linear_mdp":
        xi = spec.pop("xi", None)
        if xi is None:
            xi = default_xi(float(spec.pop("xi_norm", 0.3)))
        spec.pop("xi_norm", None)
        return build_simulated_linear_mdp(SimLinearMDPParams(xi=tuple(float(x) for x in xi),
                                                              delta_env=float(spec.get("delta_env", 0.3)),
                                                              q=float(spec.get("q", 0.0)),
                                                              H=int(spec.get("H", 3))))
    if builder == "american_put":
        casts = {k: type(getattr(AmericanPutParams(), k)) for k in AmericanPutParams.__dataclass_fields__}
        return build_american_put(AmericanPutParams(**{k: casts[k](v) for k, v in spec.items()}))
    if builder == "hard_instance":
        H, d = int(spec["H"]), int(spec["d"])
        xi = np.asarray(spec["xi"], dtype=float).reshape(H, d)
        return build_hard_instance_env(HardInstanceParams(xi=xi, K=int(spec["K"]), lam=float(spec["lam"]),
                                                          divergence=spec.get("divergence", "TV")))
    raise ValueError(f"unknown builder {builder!r}")


def _format(value):
    if isinstance(value, (list, tuple, np.ndarray)):
        return ",".join(repr(float(v)) if isinstance(v, float) else str(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def write_descriptor(env: TabularMDP, path) -> None:
    write_keyvalue(path, {k: _format(v) for k, v in env.params.items()})


def read_descriptor(path) -> TabularMDP:
    raw = read_keyvalue(path)
    spec = {}
    list_keys = {"xi"}
    for k, v in raw.items():
        spec[k] = [float(x) for x in v.split(",")] if k in list_keys else v
    return build_environment(spec)
