"""Toy tasks with semi-sparse rewards, scripted data collectors and policy evaluation.

Rewards follow one rule everywhere: each step pays minus the number of subtasks
still unfinished in the state the step starts from.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .dataset import Trajectory, TrajectoryDataset, action_codes, decode_actions


@dataclass
class TabularMDP:
    """Finite MDP with ``P[s, a, s']`` transition probabilities and ``R[s, a]`` rewards.

    Also usable directly as an environment: states are integers and
    ``obs_table[s]`` is what an agent observes.
    """

    P: np.ndarray
    R: np.ndarray
    initial_state: int
    horizon: int
    completed: np.ndarray  # subtasks finished in each state
    n_subtasks: int
    obs_table: np.ndarray
    expert: np.ndarray  # scripted-optimal action per state
    name: str = "tabular"
    obs_kind: str = "full"

    action_kind = "discrete"
    act_dim = 1

    def __post_init__(self):
        S, A = self.R.shape
        if self.P.shape != (S, A, S):
            raise ValueError("transition table must have shape (S, A, S)")
        if not np.allclose(self.P.sum(axis=2), 1.0) or np.any(self.P < 0):
            raise ValueError("transition rows must be probability vectors")
        if not np.all(np.isfinite(self.R)):
            raise ValueError("rewards must be finite")
        self._next = self.P.argmax(axis=2) if np.all(self.P.max(axis=2) == 1.0) else None

    @property
    def n_states(self) -> int:
        return self.R.shape[0]

    @property
    def n_actions(self) -> int:
        return self.R.shape[1]

    @property
    def obs_dim(self) -> int:
        return self.obs_table.shape[1]

    @property
    def deterministic(self) -> bool:
        return self._next is not None

    def reset(self) -> int:
        return self.initial_state

    def observe(self, s: int) -> np.ndarray:
        return self.obs_table[s]

    def step(self, s: int, a: int, rng: np.random.Generator | None = None) -> tuple[int, float]:
        r = float(self.R[s, a])
        if self._next is not None:
            return int(self._next[s, a]), r
        return int(rng.choice(self.n_states, p=self.P[s, a])), r

    def progress(self, s: int) -> int:
        return int(self.completed[s])

    def expert_action(self, s: int) -> int:
        return int(self.expert[s])

    def obs_progress(self, obs: np.ndarray) -> int:
        """Finished-subtask count read off an observation."""
        if self.obs_kind == "boundary":
            return int(np.argmax(obs[: self.n_subtasks + 1]))
        return self.progress(self.state_of(obs))

    def random_action(self, rng: np.random.Generator) -> int:
        return int(rng.integers(self.n_actions))

    def state_of(self, obs: np.ndarray) -> int:
        """Inverse of ``observe``; only defined when observations identify states."""
        if not hasattr(self, "_obs_index"):
            keys = [row.tobytes() for row in np.ascontiguousarray(self.obs_table, dtype=np.float64)]
            if len(set(keys)) != len(keys):
                raise ValueError("observations alias several states; no state lookup")
            self._obs_index = {k: i for i, k in enumerate(keys)}
        return self._obs_index[np.ascontiguousarray(obs, dtype=np.float64).tobytes()]

    def canonicalize(self, seqs: np.ndarray) -> np.ndarray:
        """Snap raw sequence samples onto the discrete action codes."""
        codes = action_codes(self.n_actions)
        return codes[decode_actions(seqs, self.n_actions)]

    def decode(self, seq: np.ndarray) -> list[int]:
        return [int(i) for i in decode_actions(np.ravel(seq), self.n_actions)]

    def encode(self, actions) -> np.ndarray:
        return action_codes(self.n_actions)[np.asarray(actions, dtype=np.int64)]


def chain_correct_action(k: int, p: int, n_actions: int) -> int:
    return (k + 2 * p + 1) % n_actions


def chain_env(
    K_subtasks: int,
    steps_per_subtask: int,
    n_actions: int = 3,
    horizon: int = 60,
    observation: str = "full",
) -> TabularMDP:
    """Sequential-subtask chain.

    Subtask ``k`` needs ``steps_per_subtask`` specific actions in order; a wrong
    action leaves the state unchanged.  After the last subtask the task sits in
    an absorbing done state with reward 0.

    ``observation="full"`` exposes the state as a one-hot vector.
    ``observation="boundary"`` shows only the number of finished subtasks and
    whether the agent stands at the start of a subtask; progress inside a
    subtask is hidden, so a single-step decision cannot tell where it is in the
    sequence while an H-step chunk started at the boundary can.
    """
    if K_subtasks < 1 or steps_per_subtask < 1:
        raise ValueError("need at least one subtask of at least one step")
    if n_actions < 1:
        raise ValueError("need at least one action")
    K, m, A = K_subtasks, steps_per_subtask, n_actions
    S = K * m + 1
    done = S - 1
    P = np.zeros((S, A, S))
    R = np.zeros((S, A))
    completed = np.zeros(S, dtype=np.int64)
    expert = np.zeros(S, dtype=np.int64)
    for s in range(S):
        k, p = divmod(s, m)
        if s == done:
            k, p = K, 0
        completed[s] = k
        R[s, :] = -(K - k)
        if s == done:
            P[s, :, done] = 1.0
            continue
        good = chain_correct_action(k, p, A)
        expert[s] = good
        for a in range(A):
            P[s, a, s + 1 if a == good else s] = 1.0
    if observation == "full":
        obs = np.eye(S)
    elif observation == "boundary":
        obs = np.zeros((S, K + 2))
        for s in range(S):
            obs[s, completed[s]] = 1.0
            obs[s, K + 1] = 1.0 if (s == done or s % m == 0) else 0.0
    else:
        raise ValueError(f"unknown observation mode {observation!r}")
    return TabularMDP(
        P, R, 0, horizon, completed, K, obs, expert, name=f"chain-K{K}-m{m}-{observation}", obs_kind=observation
    )


@dataclass
class PointMassTask:
    """2-D point mass that must visit waypoints in order; continuous actions in [-1, 1]^2.

    State is ``(x, y, vx, vy, k)`` with ``k`` the number of waypoints reached.
    """

    waypoints: np.ndarray = field(default_factory=lambda: np.array([[0.6, 0.6], [-0.6, 0.6], [-0.6, -0.6]]))
    radius: float = 0.15
    horizon: int = 100
    dt: float = 0.1
    damping: float = 0.8
    arena: float = 1.0

    action_kind = "continuous"
    act_dim = 2
    n_actions = 0
    name = "pointmass"

    def __post_init__(self):
        self.waypoints = np.asarray(self.waypoints, dtype=np.float64)

    @property
    def n_subtasks(self) -> int:
        return len(self.waypoints)

    @property
    def obs_dim(self) -> int:
        return 4 + self.n_subtasks + 1

    def reset(self) -> np.ndarray:
        return np.zeros(5)

    def observe(self, s: np.ndarray) -> np.ndarray:
        onehot = np.zeros(self.n_subtasks + 1)
        onehot[int(s[4])] = 1.0
        return np.concatenate([s[:4], onehot])

    def step(self, s: np.ndarray, a, rng=None) -> tuple[np.ndarray, float]:
        k = int(s[4])
        r = -float(self.n_subtasks - k)
        a = np.clip(np.asarray(a, dtype=np.float64), -1.0, 1.0)
        vel = self.damping * s[2:4] + self.dt * a * 4.0
        pos = np.clip(s[:2] + self.dt * vel, -self.arena, self.arena)
        if k < self.n_subtasks and np.linalg.norm(pos - self.waypoints[k]) <= self.radius:
            k += 1
        return np.array([pos[0], pos[1], vel[0], vel[1], float(k)]), r

    def progress(self, s: np.ndarray) -> int:
        return int(s[4])

    def obs_progress(self, obs: np.ndarray) -> int:
        return int(np.argmax(obs[4:]))

    def expert_action(self, s: np.ndarray) -> np.ndarray:
        k = int(s[4])
        if k >= self.n_subtasks:
            return -0.5 * s[2:4]
        err = self.waypoints[k] - s[:2]
        return np.clip(3.0 * err - 0.6 * s[2:4], -1.0, 1.0)

    def random_action(self, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-1.0, 1.0, size=2)

    def canonicalize(self, seqs: np.ndarray) -> np.ndarray:
        return seqs

    def decode(self, seq: np.ndarray) -> list[np.ndarray]:
        return list(np.asarray(seq, dtype=np.float64).reshape(-1, self.act_dim))

    def encode(self, actions) -> np.ndarray:
        return np.asarray(actions, dtype=np.float64)


def _sticky_discrete_noise(env, noise: float, rng: np.random.Generator):
    held, left = 0, 0

    def act(s):
        nonlocal held, left
        if left > 0:
            left -= 1
            return held
        if rng.random() < noise:
            held = env.random_action(rng)
            left = int(rng.integers(0, 3))
            return held
        return env.expert_action(s)

    return act


def _ou_continuous_noise(env, noise: float, rng: np.random.Generator, theta: float = 0.15, scale: float = 0.6):
    x = np.zeros(env.act_dim)

    def act(s):
        nonlocal x
        x = x + theta * (-x) + scale * np.sqrt(2.0 * theta) * rng.standard_normal(env.act_dim)
        return np.clip((1.0 - noise) * env.expert_action(s) + noise * x, -1.0, 1.0)

    return act


def collect_play_data(env, n_trajectories: int, noise: float, rng: np.random.Generator) -> TrajectoryDataset:
    """Roll out the scripted controller corrupted by temporally correlated noise.

    Discrete tasks: with probability ``noise`` per step a random action is
    started and held for 1-3 steps.  Continuous tasks: the action blends the
    scripted action with an Ornstein-Uhlenbeck process, weight ``noise``.
    Every trajectory runs the full horizon and ends by timeout.
    """
    if not 0.0 <= noise <= 1.0:
        raise ValueError("noise must lie in [0, 1]")
    ds = TrajectoryDataset(env.obs_dim, env.act_dim, env.action_kind, env.n_actions)
    for _ in range(n_trajectories):
        act = (_sticky_discrete_noise if env.action_kind == "discrete" else _ou_continuous_noise)(env, noise, rng)
        s = env.reset()
        states, actions, rewards = [env.observe(s)], [], []
        for _ in range(env.horizon):
            a = act(s)
            s, r = env.step(s, a, rng)
            states.append(env.observe(s))
            actions.append(a)
            rewards.append(r)
        acts = np.asarray(actions, dtype=np.int64 if env.action_kind == "discrete" else np.float64)
        ds.append(Trajectory(np.asarray(states, dtype=np.float64), acts, np.asarray(rewards), terminal=False))
    return ds


def success_fraction(env, dataset: TrajectoryDataset) -> float:
    """Share of trajectories whose final state has every subtask finished."""
    if len(dataset) == 0:
        return 0.0
    hits = sum(env.obs_progress(tr.states[-1]) == env.n_subtasks for tr in dataset.trajectories)
    return hits / len(dataset)


# evaluation ---------------------------------------------------------------

Agent = Callable[[np.ndarray, object, np.random.Generator], np.ndarray]


def scripted_agent(env, H: int) -> Agent:
    """Plays the scripted optimum in H-step chunks by simulating ahead (deterministic tasks)."""

    def agent(obs, state, rng):
        s, seq = state, []
        for _ in range(H):
            a = env.expert_action(s)
            seq.append(a)
            s, _ = env.step(s, a, rng)
        return env.encode(seq).reshape(-1)

    return agent


def policy_agent(env, policy, learner=None, mode: str = "sample", n: int = 1, beta: float = 1.0) -> Agent:
    """Chunk selector: plain sampling, or best-of-n (greedy / softmax) scored by ``learner``."""
    from .policy import best_of_n

    def agent(obs, state, rng):
        if mode == "sample":
            return env.canonicalize(policy.sample_n(obs, 1, rng))[0]
        if mode == "mean":
            return env.canonicalize(policy.mean_action(obs[None, :]))[0]
        seq, _ = best_of_n(policy, learner, obs, n, mode, beta, rng, env.canonicalize)
        return seq

    return agent


def run_episode(env, agent: Agent, rng: np.random.Generator) -> tuple[float, bool]:
    s = env.reset()
    t, ret = 0, 0.0
    while t < env.horizon:
        for a in env.decode(agent(env.observe(s), s, rng)):
            if t >= env.horizon:
                break
            s, r = env.step(s, a, rng)
            ret += r
            t += 1
    return ret, env.progress(s) == env.n_subtasks


def evaluate_policy(env, agent: Agent, n_episodes: int, rng: np.random.Generator, threads: int = 1) -> dict:
    """Mean return and success rate; each episode gets its own child generator,
    so results do not depend on ``threads``."""
    seeds = rng.integers(0, 2**63 - 1, size=n_episodes)
    jobs = [np.random.default_rng(int(sd)) for sd in seeds]
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(lambda g: run_episode(env, agent, g), jobs))
    else:
        results = [run_episode(env, agent, g) for g in jobs]
    rets = np.array([r for r, _ in results])
    succ = np.array([s for _, s in results], dtype=np.float64)
    return {
        "mean_return": float(rets.mean()) if n_episodes else 0.0,
        "success_rate": float(succ.mean()) if n_episodes else 0.0,
        "episodes": n_episodes,
    }
