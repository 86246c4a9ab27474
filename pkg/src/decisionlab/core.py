"""Shared domain types: seeded randomness, tabular decision processes, belief algebra.

Conventions used throughout the package:

* time is 1-based, ``t = 1..T``; a trajectory records one ``(obs, action, reward)``
  step per period,
* probability vectors / stochastic-matrix rows must sum to 1 within ``PROB_ATOL``
  and are renormalized exactly on construction,
* transition kernels are indexed ``[state, action, next_state]`` and observation
  kernels ``[state, action, obs]`` where ``state`` is the state *emitting* the
  observation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

PROB_ATOL = 1e-9

_U64 = (1 << 64) - 1


class ZeroLikelihood(ValueError):
    """Bayes update conditioned on an observation with zero predictive mass."""


class Unsupported(ValueError):
    """KL divergence query where p has mass on an outcome q rules out."""


# ---------------------------------------------------------------------------
# randomness


def _splitmix64(z: int) -> int:
    """One step of the splitmix64 output mix; used to derive child stream ids."""
    z = (z + 0x9E3779B97F4A7C15) & _U64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
    return (z ^ (z >> 31)) & _U64


class Rng:
    """Counter-based generator with explicit stream splitting.

    Wraps numpy's Philox so that results are reproducible across platforms and
    insensitive to execution order: a generator is fully determined by
    ``(seed, stream)``, packed into the 128-bit Philox key as
    ``seed | (stream << 64)``.  ``split(i)`` derives an independent child
    stream from the parent stream id and the index ``i`` with a splitmix64
    mix, so parallel workers can build their own generators from plain
    integers without sharing state.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & _U64
        self.stream = int(stream) & _U64
        key = self.seed | (self.stream << 64)
        self.gen = np.random.Generator(np.random.Philox(key=key))

    def split(self, index: int) -> "Rng":
        child = _splitmix64(self.stream ^ _splitmix64(int(index)))
        return Rng(self.seed, child)

    # thin passthroughs for the handful of draws used in this package
    def uniform(self, low=0.0, high=1.0, size=None):
        return self.gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def standard_normal(self, size=None):
        return self.gen.standard_normal(size)

    def dirichlet(self, alpha):
        return self.gen.dirichlet(alpha)

    def permutation(self, x):
        return self.gen.permutation(x)

    def draw_index(self, probs: np.ndarray) -> int:
        """Sample a categorical index using a single uniform draw.

        Inverse-CDF keeps the number of underlying draws fixed per call, which
        keeps paired rollouts aligned stream-for-stream.
        """
        u = self.gen.uniform()
        return int(np.searchsorted(np.cumsum(probs), u, side="right").clip(0, len(probs) - 1))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


# ---------------------------------------------------------------------------
# probability validation


def _validated_probs(arr: np.ndarray, name: str) -> np.ndarray:
    """Check that trailing-axis slices are probability vectors; renormalize exactly.

    Entries in ``[-PROB_ATOL, 0)`` are treated as roundoff and clipped to zero;
    anything more negative, non-finite, or with a row sum off by more than
    ``PROB_ATOL`` is rejected.
    """
    arr = np.asarray(arr, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name}: non-finite entries")
    if np.any(arr < -PROB_ATOL):
        raise ValueError(f"{name}: negative entries")
    arr = np.clip(arr, 0.0, None)
    sums = arr.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > PROB_ATOL):
        worst = float(np.abs(sums - 1.0).max())
        raise ValueError(f"{name}: rows must sum to 1 (max deviation {worst:.3e})")
    # Renormalize only rows measurably off 1: a freshly normalized row lands
    # within a few ulps of 1, so validation is idempotent and arrays survive
    # a save/load cycle bit-exact.
    tol = 4.0 * np.finfo(np.float64).eps * arr.shape[-1]
    off = np.abs(sums - 1.0) > tol
    if np.any(off):
        arr = np.where(off[..., None], arr / sums[..., None], arr)
    arr.flags.writeable = False
    return arr


# ---------------------------------------------------------------------------
# decision-process containers


@dataclass
class TabularMDP:
    """Finite-horizon tabular MDP.

    ``transition`` has shape (S, A, S), ``reward`` (S, A), ``initial_dist`` (S,).
    ``discount`` weights period t by discount**(t-1) in returns.
    """

    num_states: int
    num_actions: int
    transition: np.ndarray
    reward: np.ndarray
    initial_dist: np.ndarray
    horizon: int
    discount: float = 1.0

    def __post_init__(self):
        S, A = self.num_states, self.num_actions
        self.transition = _validated_probs(
            np.asarray(self.transition, dtype=np.float64).reshape(S, A, S), "transition")
        self.reward = np.asarray(self.reward, dtype=np.float64).reshape(S, A).copy()
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("reward: non-finite entries")
        self.reward.flags.writeable = False
        self.initial_dist = _validated_probs(
            np.asarray(self.initial_dist, dtype=np.float64).reshape(S), "initial_dist")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (0.0 < self.discount <= 1.0):
            raise ValueError("discount must lie in (0, 1]")


@dataclass
class TabularPOMDP:
    """Tabular MDP plus an observation kernel of shape (S, A, O).

    ``observation[s, a, o]`` is the probability of emitting ``o`` from state
    ``s`` when the most recent action was ``a``; the initial observation (before
    any action) uses action index 0.
    """

    mdp: TabularMDP
    num_obs: int
    observation: np.ndarray

    def __post_init__(self):
        S, A = self.mdp.num_states, self.mdp.num_actions
        self.observation = _validated_probs(
            np.asarray(self.observation, dtype=np.float64).reshape(S, A, self.num_obs),
            "observation")

    @property
    def num_states(self) -> int:
        return self.mdp.num_states

    @property
    def num_actions(self) -> int:
        return self.mdp.num_actions

    @property
    def horizon(self) -> int:
        return self.mdp.horizon

    @property
    def discount(self) -> float:
        return self.mdp.discount


@dataclass
class KernelPair:
    """One candidate model of an ambiguous POMDP: (transition, observation)."""

    transition: np.ndarray
    observation: np.ndarray


@dataclass
class AmbiguousPOMDP:
    """POMDP whose dynamics are only known up to a finite set of candidate models.

    ``models[0]`` is the nominal (base) model used for simulation unless stated
    otherwise; ``alpha`` in [0, 1] weights worst-case against best-case model
    evaluation when planning (1 = fully pessimistic).
    """

    num_states: int
    num_actions: int
    num_obs: int
    models: list[KernelPair]
    reward: np.ndarray
    initial_dist: np.ndarray
    horizon: int
    discount: float = 1.0
    alpha: float = 0.5

    def __post_init__(self):
        if not self.models:
            raise ValueError("models must be non-empty")
        S, A, O = self.num_states, self.num_actions, self.num_obs
        fixed = []
        for i, m in enumerate(self.models):
            P = _validated_probs(np.asarray(m.transition, dtype=np.float64).reshape(S, A, S),
                                 f"models[{i}].transition")
            Q = _validated_probs(np.asarray(m.observation, dtype=np.float64).reshape(S, A, O),
                                 f"models[{i}].observation")
            fixed.append(KernelPair(P, Q))
        self.models = fixed
        self.reward = np.asarray(self.reward, dtype=np.float64).reshape(S, A).copy()
        if not np.all(np.isfinite(self.reward)):
            raise ValueError("reward: non-finite entries")
        self.reward.flags.writeable = False
        self.initial_dist = _validated_probs(
            np.asarray(self.initial_dist, dtype=np.float64).reshape(S), "initial_dist")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")
        if not (0.0 < self.discount <= 1.0):
            raise ValueError("discount must lie in (0, 1]")
        if not (0.0 <= self.alpha <= 1.0):
            raise ValueError("alpha must lie in [0, 1]")

    def base_pomdp(self) -> TabularPOMDP:
        """The nominal model as an ordinary POMDP (used for simulation/fallbacks)."""
        base = self.models[0]
        mdp = TabularMDP(self.num_states, self.num_actions, base.transition,
                         self.reward, self.initial_dist, self.horizon, self.discount)
        return TabularPOMDP(mdp, self.num_obs, base.observation)


# ---------------------------------------------------------------------------
# beliefs


@dataclass
class Belief:
    """Probability vector over latent states."""

    probs: np.ndarray

    def __post_init__(self):
        self.probs = _validated_probs(np.asarray(self.probs, dtype=np.float64).ravel(), "belief")

    def __len__(self):
        return len(self.probs)


def belief_update(belief: Belief, action: int, obs: int,
                  transition: np.ndarray, observation: np.ndarray) -> Belief:
    """Bayes posterior over next states after taking ``action`` and seeing ``obs``.

    post(s') prop-to Q(obs | s', action) * sum_s P(s' | s, action) b(s).
    Raises ZeroLikelihood when the predictive mass of ``obs`` is zero.
    """
    pred = belief.probs @ transition[:, action, :]
    post = pred * observation[:, action, obs]
    mass = post.sum()
    if mass <= 0.0:
        raise ZeroLikelihood(
            f"observation {obs} has zero predictive probability under action {action}")
    return Belief(post / mass)


def belief_predictive(belief: Belief, action: int,
                      transition: np.ndarray, observation: np.ndarray) -> np.ndarray:
    """Predictive distribution over the next observation given belief and action."""
    pred = belief.probs @ transition[:, action, :]
    return pred @ observation[:, action, :]


def kl_divergence(p: np.ndarray, q: np.ndarray) -> float:
    """KL(p || q) for finite distributions, with 0 log 0 = 0.

    Raises Unsupported when p places mass where q has none; the result is
    clipped at zero to absorb roundoff on nearly identical inputs.
    """
    p = np.asarray(p, dtype=np.float64).ravel()
    q = np.asarray(q, dtype=np.float64).ravel()
    if p.shape != q.shape:
        raise ValueError("p and q must have the same length")
    mask = p > 0.0
    if np.any(q[mask] <= 0.0):
        raise Unsupported("p has mass where q has none")
    val = float(np.sum(p[mask] * np.log(p[mask] / q[mask])))
    return max(val, 0.0)


# ---------------------------------------------------------------------------
# trajectories


class Step(NamedTuple):
    obs: int
    action: int
    reward: float


@dataclass
class Trajectory:
    """One episode: (obs, action, reward) per period, plus the owning task id."""

    task_id: str
    steps: list[Step] = field(default_factory=list)

    def append(self, obs: int, action: int, reward: float):
        self.steps.append(Step(int(obs), int(action), float(reward)))

    def __len__(self):
        return len(self.steps)

    def discounted_return(self, discount: float) -> float:
        """Sum of discount**(t-1) * r_t, accumulated in step order."""
        total = 0.0
        weight = 1.0
        for step in self.steps:
            total += weight * step.reward
            weight *= discount
        return total
