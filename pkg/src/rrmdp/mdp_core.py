"""Finite-horizon tabular MDPs with linear (simplex) features, policies and offline datasets.

Stages are 0-indexed internally (``h = 0 .. H-1``); files written to disk use
1-indexed stages to match the usual ``h = 1 .. H`` convention.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

SIMPLEX_TOL = 1e-12
KERNEL_TOL = 1e-10


def _frozen(x, dtype=float) -> np.ndarray:
    arr = np.array(x, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class FeatureMap:
    """Per-(state, action) feature vectors, ``table[s, a]`` of length ``d``."""

    table: np.ndarray

    def __post_init__(self):
        table = _frozen(self.table)
        if table.ndim != 3:
            raise ValueError(f"feature table must have shape (S, A, d), got {table.shape}")
        object.__setattr__(self, "table", table)

    @property
    def d(self) -> int:
        return self.table.shape[2]

    def __call__(self, s, a) -> np.ndarray:
        return self.table[s, a]


@dataclass(frozen=True)
class TabularMDP:
    """Finite-horizon MDP with an explicit kernel and linearly parameterized rewards.

    ``kernel[h, s, a]`` is the next-state distribution at stage ``h`` and the mean
    reward is ``<features(s, a), theta[h]>``. ``reward_noise`` is the standard
    deviation of Gaussian noise added to rewards when sampling datasets.
    ``reward_scale`` converts normalized rewards back to display units.
    """

    features: FeatureMap
    kernel: np.ndarray
    theta: np.ndarray
    initial_dist: np.ndarray
    reward_noise: float = 0.0
    reward_scale: float = 1.0
    name: str = "tabular"
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kernel", _frozen(self.kernel))
        object.__setattr__(self, "theta", _frozen(self.theta))
        object.__setattr__(self, "initial_dist", _frozen(self.initial_dist))
        H, S, A, S2 = self.kernel.shape
        if S2 != S or self.features.table.shape[:2] != (S, A):
            raise ValueError("kernel and feature table disagree on (S, A)")
        if self.theta.shape != (H, self.features.d):
            raise ValueError(f"theta must have shape ({H}, {self.features.d}), got {self.theta.shape}")
        if self.initial_dist.shape != (S,):
            raise ValueError("initial_dist must be a distribution over states")
        rewards = np.einsum("sad,hd->hsa", self.features.table, self.theta)
        object.__setattr__(self, "_rewards", _frozen(rewards))

    @property
    def H(self) -> int:
        return self.kernel.shape[0]

    @property
    def n_states(self) -> int:
        return self.kernel.shape[1]

    @property
    def n_actions(self) -> int:
        return self.kernel.shape[2]

    @property
    def d(self) -> int:
        return self.features.d

    @property
    def rewards(self) -> np.ndarray:
        """Mean rewards, shape (H, S, A)."""
        return self._rewards


@dataclass(frozen=True)
class TabularLinearMDP(TabularMDP):
    """Linear MDP whose kernel factors as ``P_h(.|s,a) = <phi(s,a), mu_h(.)>``.

    ``nominal_factors[h]`` is a d x S row-stochastic matrix; the kernel is
    derived from it, so only ``features``, ``nominal_factors``, ``theta`` and
    ``initial_dist`` need to be given.
    """

    kernel: Optional[np.ndarray] = None
    theta: Optional[np.ndarray] = None
    initial_dist: Optional[np.ndarray] = None
    nominal_factors: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.nominal_factors is None:
            raise ValueError("nominal_factors is required")
        mu = _frozen(self.nominal_factors)
        if mu.ndim != 3 or mu.shape[1] != self.features.d:
            raise ValueError(f"nominal_factors must have shape (H, d, S), got {mu.shape}")
        object.__setattr__(self, "nominal_factors", mu)
        kernel = np.einsum("sad,hdt->hsat", self.features.table, mu)
        object.__setattr__(self, "kernel", kernel)
        super().__post_init__()


@dataclass(frozen=True)
class Policy:
    """Stage-indexed policy stored as action probabilities ``probs[h, s, a]``."""

    probs: np.ndarray
    kind: str = "explicit-stochastic"

    def __post_init__(self):
        probs = _frozen(self.probs)
        if probs.ndim != 3:
            raise ValueError("policy probabilities must have shape (H, S, A)")
        if np.any(probs < 0) or np.any(np.abs(probs.sum(axis=2) - 1.0) > SIMPLEX_TOL):
            raise ValueError("policy rows must be probability vectors")
        object.__setattr__(self, "probs", probs)

    @classmethod
    def deterministic(cls, actions, n_actions: int) -> "Policy":
        actions = np.asarray(actions, dtype=int)
        if np.any(actions < 0) or np.any(actions >= n_actions):
            raise ValueError("deterministic policy has out-of-range action ids")
        probs = np.zeros(actions.shape + (n_actions,))
        np.put_along_axis(probs, actions[..., None], 1.0, axis=2)
        return cls(probs, kind="deterministic-table")

    @classmethod
    def uniform(cls, H: int, n_states: int, n_actions: int) -> "Policy":
        return cls(np.full((H, n_states, n_actions), 1.0 / n_actions), kind="uniform-random")

    @property
    def H(self) -> int:
        return self.probs.shape[0]

    @property
    def actions(self) -> np.ndarray:
        """Action table (H, S); only meaningful for deterministic policies."""
        if self.kind != "deterministic-table":
            raise ValueError("policy is not deterministic")
        return self.probs.argmax(axis=2)


@dataclass(frozen=True)
class OfflineDataset:
    """K trajectories of (s, a, r, s') per stage, arrays of shape (K, H)."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    source_seed: int = 0
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, dtype in (("states", int), ("actions", int), ("rewards", float), ("next_states", int)):
            arr = _frozen(getattr(self, name), dtype=dtype)
            if arr.ndim != 2:
                raise ValueError(f"{name} must have shape (K, H)")
            object.__setattr__(self, name, arr)
        shapes = {self.states.shape, self.actions.shape, self.rewards.shape, self.next_states.shape}
        if len(shapes) != 1:
            raise ValueError("record grid is not fully populated")

    @property
    def K(self) -> int:
        return self.states.shape[0]

    @property
    def H(self) -> int:
        return self.states.shape[1]

    @classmethod
    def empty(cls, H: int, **meta) -> "OfflineDataset":
        z = np.zeros((0, H), dtype=int)
        return cls(z, z, z.astype(float), z, meta=meta)

    def digest(self) -> str:
        h = hashlib.sha256()
        for arr in (self.states, self.actions, self.rewards, self.next_states):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()

    def to_csv(self, path) -> Path:
        """Write ``k,h,s,a,r,s_next`` rows plus a ``<path>.meta`` key=value sidecar."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        K, H = self.states.shape
        k_idx, h_idx = np.meshgrid(np.arange(K), np.arange(H), indexing="ij")
        with open(path, "w") as f:
            f.write("k,h,s,a,r,s_next\n")
            for row in zip(k_idx.ravel(), h_idx.ravel() + 1, self.states.ravel(), self.actions.ravel(),
                           self.rewards.ravel(), self.next_states.ravel()):
                f.write(f"{row[0]},{row[1]},{row[2]},{row[3]},{float(row[4])!r},{row[5]}\n")
        meta = {"seed": self.source_seed, "K": K, "H": H, **self.meta}
        write_keyvalue(meta_path(path), meta)
        return path

    @classmethod
    def from_csv(cls, path) -> "OfflineDataset":
        path = Path(path)
        meta = read_keyvalue(meta_path(path))
        K, H = int(meta.pop("K")), int(meta.pop("H"))
        seed = int(meta.pop("seed"))
        data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
        if data.shape[0] != K * H:
            raise ValueError(f"{path}: expected {K * H} records, found {data.shape[0]}")
        grid = {}
        for col, name in ((2, "states"), (3, "actions"), (4, "rewards"), (5, "next_states")):
            arr = np.zeros((K, H))
            arr[data[:, 0].astype(int), data[:, 1].astype(int) - 1] = data[:, col]
            grid[name] = arr
        return cls(source_seed=seed, meta=meta, **grid)


DIVERGENCES = ("TV", "KL", "Chi2", "GenericF")


@dataclass(frozen=True)
class DivergenceSpec:
    """Divergence kind with its regularizer ``lam``.

    ``conjugate`` is only used for GenericF and must be a ``duals.Conjugate``.
    """

    kind: str
    lam: float
    conjugate: Optional[object] = None

    def __post_init__(self):
        if self.kind not in DIVERGENCES:
            raise ValueError(f"unknown divergence {self.kind!r}; expected one of {DIVERGENCES}")
        if not (self.lam > 0) or not np.isfinite(self.lam):
            raise ValueError(f"lambda must be a positive finite real, got {self.lam}")
        if self.kind == "GenericF" and self.conjugate is None:
            raise ValueError("GenericF divergence needs a conjugate")


def meta_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".meta")


def write_keyvalue(path, mapping: dict) -> None:
    with open(path, "w") as f:
        for key, value in mapping.items():
            f.write(f"{key}={value}\n")


def read_keyvalue(path) -> dict:
    out = {}
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


@dataclass(frozen=True)
class Violation:
    invariant: str
    index: tuple
    detail: str


@dataclass
class ValidationReport:
    violations: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def add(self, invariant, index, detail):
        self.violations.append(Violation(invariant, tuple(int(i) for i in index), detail))

    def __str__(self):
        if self.ok:
            return "valid"
        return "; ".join(f"{v.invariant} at {v.index}: {v.detail}" for v in self.violations)


class InvalidEnvironmentError(ValueError):
    def __init__(self, report: ValidationReport):
        super().__init__(str(report))
        self.report = report


def validate_linear_mdp(env: TabularMDP) -> ValidationReport:
    """List every violated structural invariant of ``env`` with its index.

    Checks simplex features, row-stochastic nominal factors (for linear MDPs),
    the norm bound ``||theta_h|| <= sqrt(d)``, rewards in [0, 1], and that every
    kernel row is a probability vector.
    """
    report = ValidationReport()
    phi = env.features.table
    d = env.d
    for s, a in zip(*np.nonzero(np.abs(phi.sum(axis=2) - 1.0) > SIMPLEX_TOL)):
        report.add("feature-simplex-sum", (s, a), f"sum = {phi[s, a].sum():.6g}")
    for s, a in zip(*np.nonzero(phi.min(axis=2) < 0)):
        report.add("feature-nonnegative", (s, a), f"min entry = {phi[s, a].min():.6g}")

    mu = getattr(env, "nominal_factors", None)
    if mu is not None:
        row_sums = mu.sum(axis=2)
        for h, i in zip(*np.nonzero(np.abs(row_sums - 1.0) > SIMPLEX_TOL)):
            report.add("factor-row-stochastic", (h, i), f"sum = {row_sums[h, i]:.6g}")
        for h, i in zip(*np.nonzero(mu.min(axis=2) < 0)):
            report.add("factor-nonnegative", (h, i), "negative probability")

    norms = np.linalg.norm(env.theta, axis=1)
    for h in np.nonzero(norms > np.sqrt(d) + 1e-12)[0]:
        report.add("theta-norm", (h,), f"||theta|| = {norms[h]:.6g} > sqrt(d) = {np.sqrt(d):.6g}")

    r = env.rewards
    for h, s, a in zip(*np.nonzero((r < -1e-12) | (r > 1 + 1e-12))):
        report.add("reward-range", (h, s, a), f"r = {r[h, s, a]:.6g}")

    P = env.kernel
    bad = (np.abs(P.sum(axis=3) - 1.0) > KERNEL_TOL) | (P.min(axis=3) < -KERNEL_TOL)
    for h, s, a in zip(*np.nonzero(bad)):
        report.add("kernel-probability", (h, s, a), f"sum = {P[h, s, a].sum():.6g}")
    return report


def _categorical(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Inverse-CDF sampling of one index per row of ``probs``."""
    cdf = np.cumsum(probs, axis=-1)
    idx = (cdf < u[:, None] * cdf[:, -1:]).sum(axis=1)
    return np.minimum(idx, probs.shape[-1] - 1)


def simulate(env: TabularMDP, policy: Policy, K: int, seed: int, reward_noise: float = 0.0):
    """Roll out K episodes; returns (states, actions, rewards, next_states), each (K, H).

    Randomness comes from per-role streams (initial state, action, transition,
    reward noise) of one seeded generator tree; row k of every stream belongs
    to trajectory k, so trajectory k does not depend on K or on the order in
    which trajectories are consumed.
    """
    H, S = env.H, env.n_states
    roles = np.random.SeedSequence(seed).spawn(4)
    u_init = np.random.default_rng(roles[0]).random(K)
    u_act = np.random.default_rng(roles[1]).random((K, H))
    u_next = np.random.default_rng(roles[2]).random((K, H))
    noise = np.random.default_rng(roles[3]).standard_normal((K, H))

    states = np.zeros((K, H), dtype=int)
    actions = np.zeros((K, H), dtype=int)
    next_states = np.zeros((K, H), dtype=int)
    s = _categorical(np.broadcast_to(env.initial_dist, (K, S)), u_init)
    for h in range(H):
        states[:, h] = s
        a = _categorical(policy.probs[h, s], u_act[:, h])
        actions[:, h] = a
        s = _categorical(env.kernel[h, s, a], u_next[:, h])
        next_states[:, h] = s
    rewards = env.rewards[np.arange(H)[None, :], states, actions]
    if reward_noise:
        rewards = rewards + reward_noise * noise
    return states, actions, rewards, next_states


def collect_dataset(env: TabularMDP, behavior: Policy, K: int, seed: int) -> OfflineDataset:
    """Collect K trajectories in the nominal environment under ``behavior``."""
    if K < 0:
        raise ValueError("K must be non-negative")
    report = validate_linear_mdp(env)
    if not report.ok:
        raise InvalidEnvironmentError(report)
    if behavior.probs.shape != (env.H, env.n_states, env.n_actions):
        raise ValueError("behavior policy does not match the environment")
    states, actions, rewards, next_states = simulate(env, behavior, K, seed, env.reward_noise)
    meta = {"env": env.name, "d": env.d}
    return OfflineDataset(states, actions, rewards, next_states, source_seed=seed, meta=meta)


def empirical_visitation(dataset: OfflineDataset, n_states: int, n_actions: int) -> np.ndarray:
    """Counts of (s, a) per stage, shape (H, S, A); each stage sums to K."""
    counts = np.zeros((dataset.H, n_states, n_actions), dtype=int)
    for h in range(dataset.H):
        np.add.at(counts[h], (dataset.states[:, h], dataset.actions[:, h]), 1)
    return counts
