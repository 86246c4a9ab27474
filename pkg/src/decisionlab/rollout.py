"""Episode simulation and the policies that drive it.

``rollout`` runs one episode of a task under a ``PolicyHandle``.  Randomness
is split so that the environment's draws depend only on the rollout generator,
never on the policy: evaluating two policies with the same generator yields
draw-for-draw paired episodes, which is what makes oracle-relative gaps exact
rather than noisy.

Partially observed episodes maintain the exact Bayes belief as a side channel
(one belief per period, starting from the task prior); planners receive it
alongside the raw observation.  Ambiguous tasks are simulated under their
nominal model, and the maintained belief uses the nominal kernels as well.

External policies speak newline-delimited JSON over TCP or a child process's
stdio: one request object per line, one ``{"action": k}`` reply per line.
Replies that are valid JSON but name an out-of-range action are recorded and
mapped to action 0; malformed replies and timeouts abort the episode.
"""

from __future__ import annotations

import json
import os
import selectors
import socket
import subprocess
import threading
from dataclasses import dataclass

from .core import (AmbiguousPOMDP, Belief, Rng, Step, TabularMDP, TabularPOMDP,
                   Trajectory, belief_update)
from .envs import DarkroomTask
from .solvers import MdpSolution, QmdpPolicy, RobustSolution

DEFAULT_TIMEOUT = 60.0


class ProtocolError(RuntimeError):
    """Malformed traffic from an external policy (bad JSON, missing fields, EOF)."""


class InvalidAction(ValueError):
    """Structurally valid reply naming an action outside the task's range."""


# ---------------------------------------------------------------------------
# few-shot context


@dataclass
class FewShotContext:
    """Demonstration trajectories plus their canonical text encoding."""

    trajectories: list[Trajectory]
    encoded: str


# ---------------------------------------------------------------------------
# external-policy client


def _recv_line_tcp(sock: socket.socket, buf: bytearray, timeout: float) -> bytes:
    sock.settimeout(timeout)
    while True:
        nl = buf.find(b"\n")
        if nl >= 0:
            line = bytes(buf[:nl])
            del buf[:nl + 1]
            return line
        try:
            chunk = sock.recv(65536)
        except socket.timeout:
            raise TimeoutError("external policy did not reply within the timeout")
        if not chunk:
            raise ProtocolError("external policy closed the connection")
        buf.extend(chunk)


def _recv_line_fd(fd: int, buf: bytearray, timeout: float) -> bytes:
    sel = selectors.DefaultSelector()
    sel.register(fd, selectors.EVENT_READ)
    try:
        while True:
            nl = buf.find(b"\n")
            if nl >= 0:
                line = bytes(buf[:nl])
                del buf[:nl + 1]
                return line
            if not sel.select(timeout):
                raise TimeoutError("external policy did not reply within the timeout")
            chunk = os.read(fd, 65536)
            if not chunk:
                raise ProtocolError("external policy closed its output")
            buf.extend(chunk)
    finally:
        sel.close()


class ExternalPolicyClient:
    """One connection to an external decision-maker, one request in flight.

    Each instance owns a private transport (TCP socket or child process) and
    serializes its own requests with a lock, so per-request state is never
    shared; run several instances for concurrent episodes.
    """

    def __init__(self, timeout: float = DEFAULT_TIMEOUT):
        self.timeout = timeout
        self._lock = threading.Lock()
        self._buf = bytearray()
        self._sock: socket.socket | None = None
        self._proc: subprocess.Popen | None = None

    @classmethod
    def tcp(cls, host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> "ExternalPolicyClient":
        client = cls(timeout)
        client._sock = socket.create_connection((host, port), timeout=timeout)
        return client

    @classmethod
    def child_process(cls, argv: list[str],
                      timeout: float = DEFAULT_TIMEOUT) -> "ExternalPolicyClient":
        client = cls(timeout)
        client._proc = subprocess.Popen(
            argv, stdin=subprocess.PIPE, stdout=subprocess.PIPE)
        return client

    def query(self, request: dict, num_actions: int) -> int:
        """Send one request, read one reply, validate the chosen action."""
        line = (json.dumps(request, separators=(",", ":")) + "\n").encode()
        with self._lock:
            if self._sock is not None:
                self._sock.sendall(line)
                raw = _recv_line_tcp(self._sock, self._buf, self.timeout)
            elif self._proc is not None:
                if self._proc.poll() is not None:
                    raise ProtocolError("external policy process has exited")
                self._proc.stdin.write(line)
                self._proc.stdin.flush()
                raw = _recv_line_fd(self._proc.stdout.fileno(), self._buf, self.timeout)
            else:
                raise ProtocolError("client has no transport (already closed?)")
        try:
            reply = json.loads(raw.decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ProtocolError(f"reply is not valid JSON: {raw[:200]!r}") from exc
        if not isinstance(reply, dict) or "action" not in reply:
            raise ProtocolError(f"reply missing 'action' field: {reply!r}")
        action = reply["action"]
        if isinstance(action, bool) or not isinstance(action, int):
            raise ProtocolError(f"'action' must be an integer, got {action!r}")
        if not (0 <= action < num_actions):
            raise InvalidAction(f"action {action} outside range 0..{num_actions - 1}")
        return action

    def close(self):
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        if self._proc is not None:
            if self._proc.stdin:
                self._proc.stdin.close()
            self._proc.terminate()
            self._proc.wait(timeout=5.0)
            self._proc = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# ---------------------------------------------------------------------------
# policy handles


@dataclass
class PolicyHandle:
    """A policy the rollout loop can drive.

    kind "oracle" wraps a solved task (MdpSolution, RobustSolution, or a
    DarkroomTask for its closed-form policy); "qmdp" wraps a QmdpPolicy;
    "random" draws uniform actions from the policy stream; "external" defers
    to a wire-protocol client.
    """

    kind: str
    solution: object | None = None
    client: ExternalPolicyClient | None = None

    @classmethod
    def oracle(cls, solution) -> "PolicyHandle":
        return cls("oracle", solution=solution)

    @classmethod
    def random(cls) -> "PolicyHandle":
        return cls("random")

    @classmethod
    def qmdp(cls, policy: QmdpPolicy) -> "PolicyHandle":
        return cls("qmdp", solution=policy)

    @classmethod
    def external(cls, client: ExternalPolicyClient) -> "PolicyHandle":
        return cls("external", client=client)


def _task_spaces(task) -> tuple[int, int]:
    if isinstance(task, (TabularMDP, DarkroomTask)):
        return task.num_states, task.num_actions
    if isinstance(task, (TabularPOMDP, AmbiguousPOMDP)):
        return task.num_states, task.num_actions
    raise TypeError(f"unsupported task type {type(task).__name__}")


def _check_oracle_matches(task, solution):
    S, A = _task_spaces(task)
    if isinstance(task, TabularMDP):
        if not isinstance(solution, MdpSolution):
            raise TypeError("oracle for an MDP must be an MdpSolution")
        ok = solution.task.num_states == S and solution.task.num_actions == A \
            and solution.task.horizon == task.horizon
    elif isinstance(task, (TabularPOMDP, AmbiguousPOMDP)):
        if not isinstance(solution, RobustSolution):
            raise TypeError("oracle for a belief task must be a RobustSolution")
        ok = solution.num_states == S and solution.num_actions == A \
            and solution.horizon == task.horizon
    elif isinstance(task, DarkroomTask):
        if not isinstance(solution, DarkroomTask):
            raise TypeError("oracle for a Darkroom task is the task itself")
        ok = solution.goal == task.goal and solution.size == task.size \
            and solution.horizon == task.horizon
    else:
        ok = False
    if not ok:
        raise ValueError("oracle solution does not match the task's dimensions")


# ---------------------------------------------------------------------------
# rollout


@dataclass
class RolloutResult:
    trajectory: Trajectory
    online_return: float
    beliefs: list[Belief] | None = None
    invalid_actions: int = 0


class _Stepper:
    """Chooses actions; implementations are stateless between calls."""

    def act(self, t: int, obs: int, belief: Belief | None,
            history: list[Step]) -> int:
        raise NotImplementedError


class _RandomStepper(_Stepper):
    def __init__(self, num_actions: int, rng: Rng):
        self.num_actions = num_actions
        self.rng = rng

    def act(self, t, obs, belief, history):
        return int(self.rng.integers(0, self.num_actions))


class _MdpOracleStepper(_Stepper):
    def __init__(self, solution: MdpSolution):
        self.solution = solution

    def act(self, t, obs, belief, history):
        return self.solution.action(t, obs)


class _BeliefOracleStepper(_Stepper):
    def __init__(self, solution: RobustSolution):
        self.solution = solution

    def act(self, t, obs, belief, history):
        return self.solution.action(t, belief)


class _QmdpStepper(_Stepper):
    def __init__(self, policy: QmdpPolicy):
        self.policy = policy

    def act(self, t, obs, belief, history):
        return self.policy.action(t, belief)


class _DarkroomOracleStepper(_Stepper):
    def __init__(self, task: DarkroomTask):
        self.task = task

    def act(self, t, obs, belief, history):
        return self.task.oracle_action(obs)


class _ExternalStepper(_Stepper):
    def __init__(self, client: ExternalPolicyClient, task_id: str,
                 context: FewShotContext | None, num_actions: int):
        self.client = client
        self.task_id = task_id
        self.context = context.encoded if context is not None else ""
        self.num_actions = num_actions

    def act(self, t, obs, belief, history):
        request = {
            "task_id": self.task_id,
            "step": t,
            "context": self.context,
            "history": [{"obs": s.obs, "action": s.action, "reward": s.reward}
                        for s in history],
            "current_obs": int(obs),
            "num_actions": self.num_actions,
        }
        return self.client.query(request, self.num_actions)


def _make_stepper(task, policy: PolicyHandle, policy_rng: Rng,
                  context: FewShotContext | None, task_id: str) -> _Stepper:
    S, A = _task_spaces(task)
    if policy.kind == "random":
        return _RandomStepper(A, policy_rng)
    if policy.kind == "oracle":
        _check_oracle_matches(task, policy.solution)
        if isinstance(task, TabularMDP):
            return _MdpOracleStepper(policy.solution)
        if isinstance(task, DarkroomTask):
            return _DarkroomOracleStepper(policy.solution)
        return _BeliefOracleStepper(policy.solution)
    if policy.kind == "qmdp":
        if not isinstance(policy.solution, QmdpPolicy):
            raise TypeError("qmdp handle must wrap a QmdpPolicy")
        return _QmdpStepper(policy.solution)
    if policy.kind == "external":
        if policy.client is None:
            raise ValueError("external handle must carry a client")
        return _ExternalStepper(policy.client, task_id, context, A)
    raise ValueError(f"unknown policy kind {policy.kind!r}")


def rollout(task, policy: PolicyHandle, rng: Rng,
            context: FewShotContext | None = None,
            task_id: str = "") -> RolloutResult:
    """Simulate one episode; the environment stream is independent of the policy.

    The trajectory records one (obs, action, reward) step per period.  For
    belief tasks the result carries the per-period Bayes beliefs (under the
    nominal model) as a side channel; invalid external actions are mapped to
    action 0 and counted.
    """
    env_rng = rng.split(0)
    stepper = _make_stepper(task, policy, rng.split(1), context, task_id)
    if isinstance(task, TabularMDP):
        return _run_mdp(task, stepper, env_rng, task_id)
    if isinstance(task, (TabularPOMDP, AmbiguousPOMDP)):
        return _run_belief_task(task, stepper, env_rng, task_id)
    if isinstance(task, DarkroomTask):
        return _run_darkroom(task, stepper, task_id)
    raise TypeError(f"unsupported task type {type(task).__name__}")


def _choose(stepper: _Stepper, t: int, obs: int, belief: Belief | None,
            history: list[Step]) -> tuple[int, int]:
    """Action plus how many invalid replies were coerced to action 0."""
    try:
        return stepper.act(t, obs, belief, history), 0
    except InvalidAction:
        return 0, 1


def _run_mdp(task: TabularMDP, stepper: _Stepper, env_rng: Rng,
             task_id: str) -> RolloutResult:
    traj = Trajectory(task_id)
    total, weight, invalid = 0.0, 1.0, 0
    state = env_rng.draw_index(task.initial_dist)
    for t in range(1, task.horizon + 1):
        action, bad = _choose(stepper, t, state, None, traj.steps)
        invalid += bad
        reward = float(task.reward[state, action])
        traj.append(state, action, reward)
        total += weight * reward
        weight *= task.discount
        if t < task.horizon:
            state = env_rng.draw_index(task.transition[state, action])
    return RolloutResult(traj, total, None, invalid)


def _run_belief_task(task, stepper: _Stepper, env_rng: Rng,
                     task_id: str) -> RolloutResult:
    if isinstance(task, AmbiguousPOMDP):
        transition = task.models[0].transition
        observation = task.models[0].observation
        reward, initial = task.reward, task.initial_dist
        horizon, discount = task.horizon, task.discount
    else:
        transition, observation = task.mdp.transition, task.observation
        reward, initial = task.mdp.reward, task.mdp.initial_dist
        horizon, discount = task.horizon, task.discount
    traj = Trajectory(task_id)
    total, weight, invalid = 0.0, 1.0, 0
    state = env_rng.draw_index(initial)
    # the first observation is emitted before any action (kernel slot 0)
    obs = env_rng.draw_index(observation[state, 0])
    belief = Belief(initial)
    beliefs = [belief]
    for t in range(1, horizon + 1):
        action, bad = _choose(stepper, t, obs, belief, traj.steps)
        invalid += bad
        r = float(reward[state, action])
        traj.append(obs, action, r)
        total += weight * r
        weight *= discount
        if t < horizon:
            state = env_rng.draw_index(transition[state, action])
            obs = env_rng.draw_index(observation[state, action])
            belief = belief_update(belief, action, obs, transition, observation)
            beliefs.append(belief)
    return RolloutResult(traj, total, beliefs, invalid)


def _run_darkroom(task: DarkroomTask, stepper: _Stepper,
                  task_id: str) -> RolloutResult:
    traj = Trajectory(task_id)
    total, invalid = 0.0, 0
    state = task.state_index(0, 0)
    for t in range(1, task.horizon + 1):
        action, bad = _choose(stepper, t, state, None, traj.steps)
        invalid += bad
        next_state, reward = task.step(state, action)
        traj.append(state, action, reward)
        total += reward
        state = next_state
    return RolloutResult(traj, total, None, invalid)
