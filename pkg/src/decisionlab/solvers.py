"""Exact and robust oracles.

``solve_mdp`` is plain finite-horizon backward induction.  ``solve_pomdp`` and
``solve_apomdp`` share one belief-tree engine: beliefs reachable from the
initial distribution are enumerated level by level (one level per period),
quantized onto a simplex grid so that recurring beliefs are merged, and values
are computed by backward induction over the levels.  The robust recursion
evaluates, for every action, the candidate-model values

    H(b, a, m) = sum_o P(o | b, a, m) * V_{t+1}(update(b, a, o, m))

and combines them as ``alpha * min_m H + (1 - alpha) * max_m H`` before adding
the expected immediate reward; with a single candidate model this reduces to
the ordinary POMDP recursion, and the weighting interpolates between
worst-case (alpha = 1) and best-case (alpha = 0) planning.

Values are stored at quantized representatives: ``value(t, b)`` returns the
value of the grid point nearest ``b`` under largest-remainder rounding, and
queries off the solved tree are answered by lazily expanding the missing
subtree (counted against the same node budget).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import AmbiguousPOMDP, Belief, KernelPair, TabularMDP, TabularPOMDP


class BudgetExceeded(RuntimeError):
    """The belief tree needs more distinct quantized nodes than allowed."""


# ---------------------------------------------------------------------------
# fully observed


@dataclass
class MdpSolution:
    """Backward-induction tables; row i holds period t = i + 1 (1-based time)."""

    task: TabularMDP
    values: np.ndarray   # (T + 1, S); final row is the zero terminal value
    policy: np.ndarray   # (T, S) greedy actions, ties broken toward index 0

    def value(self, t: int, state: int) -> float:
        return float(self.values[t - 1, state])

    def action(self, t: int, state: int) -> int:
        return int(self.policy[t - 1, state])

    def q_values(self, t: int) -> np.ndarray:
        """State-action values at period t, shape (S, A)."""
        m = self.task
        future = m.transition @ self.values[t]  # (S, A) of E[V_{t+1}]
        return m.reward + m.discount * future

    def expected_return(self) -> float:
        """Optimal expected discounted return from the initial distribution."""
        return float(self.task.initial_dist @ self.values[0])


def solve_mdp(mdp: TabularMDP) -> MdpSolution:
    """Exact finite-horizon backward induction."""
    T, S = mdp.horizon, mdp.num_states
    values = np.zeros((T + 1, S))
    policy = np.zeros((T, S), dtype=np.int64)
    for t in range(T - 1, -1, -1):
        q = mdp.reward + mdp.discount * (mdp.transition @ values[t + 1])
        values[t] = q.max(axis=1)
        policy[t] = q.argmax(axis=1)
    return MdpSolution(mdp, values, policy)


# ---------------------------------------------------------------------------
# simplex quantization


def quantize_batch(probs: np.ndarray, ticks: int) -> np.ndarray:
    """Largest-remainder rounding of each row onto the grid {k / ticks}.

    Returns integer tick counts summing exactly to ``ticks`` per row.  Floors
    every coordinate, then distributes the remaining ticks to the largest
    fractional parts (ties toward lower index, stable across platforms).
    """
    probs = np.asarray(probs, dtype=np.float64)
    scaled = probs * ticks
    base = np.floor(scaled).astype(np.int32)
    frac = scaled - base
    short = ticks - base.sum(axis=1)
    order = np.argsort(-frac, axis=1, kind="stable")
    ranks = np.empty_like(order)
    rows = np.arange(probs.shape[0])[:, None]
    ranks[rows, order] = np.arange(probs.shape[1])[None, :]
    base += (ranks < short[:, None]).astype(np.int32)
    return base


def quantize_belief(belief: Belief, step: float) -> Belief:
    """Nearest grid belief under largest-remainder rounding; exact on grid points."""
    ticks = int(round(1.0 / step))
    key = quantize_batch(belief.probs[None, :], ticks)[0]
    return Belief(key.astype(np.float64) / ticks)


def _row_order_view(keys: np.ndarray) -> np.ndarray:
    """View int32 rows as fixed-width byte scalars whose memcmp order is
    numeric lexicographic order (big-endian, non-negative entries only)."""
    be = np.ascontiguousarray(keys.astype(">i4"))
    return be.view(f"V{4 * keys.shape[1]}").ravel()


# ---------------------------------------------------------------------------
# belief-tree engine


@dataclass
class BeliefSolverConfig:
    """Grid resolution, pruning, and resource limits for the belief-tree solver."""

    quantization: float = 1e-3
    node_budget: int = 5_000_000
    obs_prune: float = 1e-12
    expansion_chunk: int = 4096


class RobustSolution:
    """Backward-induction values over a quantized reachable belief tree.

    ``value(t, belief)`` evaluates the quantized representative of ``belief``
    at period ``t``; ``action(t, belief)`` is a one-step lookahead at the exact
    belief against the stored next-level values.  Beliefs outside the solved
    tree are handled by lazily solving the missing subtree, subject to the
    same node budget as the main solve.
    """

    def __init__(self, models: list[KernelPair], reward: np.ndarray,
                 initial_dist: np.ndarray, horizon: int, discount: float,
                 alpha: float, config: BeliefSolverConfig):
        self.models = models
        self.reward = reward
        self.initial_dist = initial_dist
        self.horizon = horizon
        self.discount = discount
        self.alpha = alpha
        self.config = config
        self.ticks = int(round(1.0 / config.quantization))
        self.num_states = reward.shape[0]
        self.num_actions = reward.shape[1]
        self.num_obs = models[0].observation.shape[2]
        # per period t (index t-1): sorted key table (k, S) int32 and values (k,)
        self._keys: list[np.ndarray] = []
        self._values: list[np.ndarray] = []
        # lazily added off-tree nodes: per period dict key-bytes -> value
        self._extra: list[dict[bytes, float]] = [dict() for _ in range(horizon)]
        self.node_count = 0
        self.level_sizes: list[int] = []
        self._solve()

    # -- construction -------------------------------------------------------

    def _charge_budget(self, amount: int):
        self.node_count += int(amount)
        if self.node_count > self.config.node_budget:
            raise BudgetExceeded(
                f"belief tree exceeds node budget {self.config.node_budget}")

    def _expand_chunk(self, beliefs: np.ndarray):
        """Children of a batch of beliefs for every (action, model, obs).

        Returns quantized child keys (c, A, M, O, S) int32 and observation
        weights (c, A, M, O) renormalized over unpruned observations; pruned
        children carry weight exactly 0 and an all-zero key.
        """
        c = beliefs.shape[0]
        A, M, O, S = (self.num_actions, len(self.models), self.num_obs,
                      self.num_states)
        keys = np.zeros((c, A, M, O, S), dtype=np.int32)
        weights = np.zeros((c, A, M, O))
        for mi, model in enumerate(self.models):
            pred_s = np.einsum("cs,sap->cap", beliefs, model.transition)
            post = pred_s[:, :, None, :] * model.observation.transpose(1, 2, 0)[None]
            mass = post.sum(axis=3)                      # (c, A, O) predictive probs
            keep = mass > self.config.obs_prune
            safe = np.where(keep, mass, 1.0)
            post = post / safe[..., None]
            k = quantize_batch(post.reshape(-1, S), self.ticks).reshape(c, A, O, S)
            k[~keep] = 0
            w = np.where(keep, mass, 0.0)
            w = w / w.sum(axis=2, keepdims=True)
            keys[:, :, mi] = k
            weights[:, :, mi] = w
        return keys, weights

    def _solve(self):
        cfg = self.config
        root = quantize_batch(self.initial_dist[None, :], self.ticks)
        self._charge_budget(1)
        levels = [root]
        # forward pass: discover the distinct quantized beliefs of each period
        for _ in range(1, self.horizon):
            parents = levels[-1].astype(np.float64) / self.ticks
            pending: list[np.ndarray] = []
            pending_rows = 0
            for start in range(0, parents.shape[0], cfg.expansion_chunk):
                chunk = parents[start:start + cfg.expansion_chunk]
                keys, weights = self._expand_chunk(chunk)
                rows = keys[weights > 0.0]
                pending.append(np.unique(rows, axis=0))
                pending_rows += len(pending[-1])
                if pending_rows > 4_000_000:
                    merged = np.unique(np.vstack(pending), axis=0)
                    pending, pending_rows = [merged], len(merged)
                    if self.node_count + len(merged) > cfg.node_budget:
                        raise BudgetExceeded(
                            f"belief tree exceeds node budget {cfg.node_budget}")
            nxt = np.unique(np.vstack(pending), axis=0)
            self._charge_budget(len(nxt))
            levels.append(nxt)
        # sort each level so membership queries can use binary search
        for keys in levels:
            view = _row_order_view(keys)
            order = np.argsort(view)
            self._keys.append(np.ascontiguousarray(keys[order]))
        self.level_sizes = [len(k) for k in self._keys]
        # backward pass: terminal period is a one-step reward maximization
        beliefs = self._keys[-1].astype(np.float64) / self.ticks
        self._values = [None] * self.horizon
        self._values[-1] = (beliefs @ self.reward).max(axis=1)
        for t in range(self.horizon - 2, -1, -1):
            parents = self._keys[t].astype(np.float64) / self.ticks
            vals = np.empty(parents.shape[0])
            for start in range(0, parents.shape[0], cfg.expansion_chunk):
                chunk = parents[start:start + cfg.expansion_chunk]
                vals[start:start + chunk.shape[0]] = self._chunk_values(t, chunk)
            self._values[t] = vals

    def _chunk_values(self, t: int, beliefs: np.ndarray) -> np.ndarray:
        """Robust one-step backup for a batch of period-(t+1) beliefs (0-based t)."""
        keys, weights = self._expand_chunk(beliefs)
        c, A, M, O, S = keys.shape
        flat = keys.reshape(-1, S)
        idx = self._lookup(t + 1, flat).reshape(c, A, M, O)
        child_vals = self._values[t + 1][idx]
        h = (weights * child_vals).sum(axis=3)                     # (c, A, M)
        robust = self.alpha * h.min(axis=2) + (1.0 - self.alpha) * h.max(axis=2)
        u = beliefs @ self.reward + self.discount * robust
        return u.max(axis=1)

    def _lookup(self, t: int, flat_keys: np.ndarray) -> np.ndarray:
        """Row indices of ``flat_keys`` in the level table at 0-based index t.

        Every queried key must exist (children found in the forward pass);
        pruned all-zero keys resolve to row 0 and only ever meet weight 0.
        """
        table = _row_order_view(self._keys[t])
        query = _row_order_view(flat_keys)
        pos = np.searchsorted(table, query).clip(0, len(table) - 1)
        found = table[pos] == query
        zero = ~flat_keys.any(axis=1)
        if not np.all(found | zero):
            raise AssertionError("belief-tree child missing from forward pass")
        return pos

    # -- queries -------------------------------------------------------------

    @property
    def root_value(self) -> float:
        return float(self._values[0][0]) if self.level_sizes[0] == 1 else \
            self.value(1, Belief(self.initial_dist))

    def value(self, t: int, belief: Belief) -> float:
        """Value of the quantized representative of ``belief`` at period t."""
        if not (1 <= t <= self.horizon):
            raise ValueError(f"t must lie in 1..{self.horizon}")
        key = quantize_batch(belief.probs[None, :], self.ticks)[0]
        return self._node_value(t - 1, key)

    def _node_value(self, t: int, key: np.ndarray) -> float:
        table = _row_order_view(self._keys[t])
        query = _row_order_view(key[None, :])[0]
        pos = int(np.searchsorted(table, query))
        if pos < len(table) and table[pos] == query:
            return float(self._values[t][pos])
        kb = key.tobytes()
        cached = self._extra[t].get(kb)
        if cached is not None:
            return cached
        # off-tree belief: solve the missing subtree, charging the same budget
        self._charge_budget(1)
        b = (key.astype(np.float64) / self.ticks)[None, :]
        if t == self.horizon - 1:
            val = float((b @ self.reward).max())
        else:
            keys, weights = self._expand_chunk(b)
            _, A, M, O, S = keys.shape
            child_vals = np.zeros((A, M, O))
            for a in range(A):
                for m in range(M):
                    for o in range(O):
                        if weights[0, a, m, o] > 0.0:
                            child_vals[a, m, o] = self._node_value(t + 1, keys[0, a, m, o])
            h = (weights[0] * child_vals).sum(axis=2)
            robust = self.alpha * h.min(axis=1) + (1.0 - self.alpha) * h.max(axis=1)
            val = float((b[0] @ self.reward + self.discount * robust).max())
        self._extra[t][kb] = val
        return val

    def action(self, t: int, belief: Belief) -> int:
        """Greedy action at the exact belief via one-step lookahead.

        Ties break toward the lowest action index, so truly redundant actions
        resolve identically on every platform.
        """
        if not (1 <= t <= self.horizon):
            raise ValueError(f"t must lie in 1..{self.horizon}")
        b = np.asarray(belief.probs, dtype=np.float64)[None, :]
        if t == self.horizon:
            return int((b[0] @ self.reward).argmax())
        keys, weights = self._expand_chunk(b)
        _, A, M, O, S = keys.shape
        child_vals = np.zeros((A, M, O))
        for a in range(A):
            for m in range(M):
                for o in range(O):
                    if weights[0, a, m, o] > 0.0:
                        child_vals[a, m, o] = self._node_value(t, keys[0, a, m, o])
        h = (weights[0] * child_vals).sum(axis=2)
        robust = self.alpha * h.min(axis=1) + (1.0 - self.alpha) * h.max(axis=1)
        u = b[0] @ self.reward + self.discount * robust
        return int(u.argmax())

    def to_summary(self) -> dict:
        return {
            "root_value": self.root_value,
            "node_count": self.node_count,
            "level_sizes": self.level_sizes,
            "num_models": len(self.models),
            "alpha": self.alpha,
            "quantization": self.config.quantization,
            "node_budget": self.config.node_budget,
            "obs_prune": self.config.obs_prune,
        }


def solve_pomdp(pomdp: TabularPOMDP,
                config: BeliefSolverConfig | None = None) -> RobustSolution:
    """Belief-tree backward induction for an ordinary POMDP."""
    config = config or BeliefSolverConfig()
    models = [KernelPair(pomdp.mdp.transition, pomdp.observation)]
    return RobustSolution(models, pomdp.mdp.reward, pomdp.mdp.initial_dist,
                          pomdp.horizon, pomdp.discount, alpha=1.0, config=config)


def solve_apomdp(task: AmbiguousPOMDP,
                 config: BeliefSolverConfig | None = None) -> RobustSolution:
    """Robust belief-tree backward induction over the candidate-model set."""
    config = config or BeliefSolverConfig()
    return RobustSolution(task.models, task.reward, task.initial_dist,
                          task.horizon, task.discount, alpha=task.alpha,
                          config=config)


# ---------------------------------------------------------------------------
# QMDP fallback


class QmdpPolicy:
    """Belief-weighted fully-observed Q-values: act by argmax_a b . Q_t(., a).

    A standard approximation for horizons where the belief tree is too large;
    it assumes full observability after the next step, so it never plans
    information-gathering actions.
    """

    def __init__(self, pomdp: TabularPOMDP):
        self.pomdp = pomdp
        self.mdp_solution = solve_mdp(pomdp.mdp)

    def action(self, t: int, belief: Belief) -> int:
        scores = belief.probs @ self.mdp_solution.q_values(t)
        return int(scores.argmax())


def qmdp_policy(pomdp: TabularPOMDP) -> QmdpPolicy:
    return QmdpPolicy(pomdp)
