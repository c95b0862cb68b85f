"""Offline trajectory storage and SMDP option-transition sampling."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import archive

FORMAT_VERSION = 1


class DatasetError(ValueError):
    """Malformed dataset contents or file."""


def action_codes(n_actions: int) -> np.ndarray:
    """Centers of ``n_actions`` equal cells tiling [-1, 1]; the continuous stand-in for a discrete action."""
    return -1.0 + (2.0 * np.arange(n_actions) + 1.0) / n_actions


def decode_actions(x: np.ndarray, n_actions: int) -> np.ndarray:
    idx = np.floor((np.asarray(x) + 1.0) * 0.5 * n_actions).astype(np.int64)
    return np.clip(idx, 0, n_actions - 1)


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, obs_dim)
    actions: np.ndarray  # (T, act_dim) float, or (T,) int for discrete
    rewards: np.ndarray  # (T,)
    terminal: bool = False

    def __len__(self) -> int:
        return len(self.rewards)


@dataclass
class TrajectoryDataset:
    obs_dim: int
    act_dim: int
    action_kind: str = "continuous"  # or "discrete"
    n_actions: int = 0
    trajectories: list[Trajectory] = field(default_factory=list)

    def __post_init__(self):
        if self.action_kind not in ("continuous", "discrete"):
            raise DatasetError(f"unknown action kind {self.action_kind!r}")
        if self.action_kind == "discrete" and (self.n_actions < 1 or self.act_dim != 1):
            raise DatasetError("discrete datasets need n_actions >= 1 and act_dim == 1")
        for i, tr in enumerate(self.trajectories):
            self._check(i, tr)

    def _check(self, i: int, tr: Trajectory) -> None:
        T = len(tr.rewards)
        if tr.states.shape != (T + 1, self.obs_dim):
            raise DatasetError(f"trajectory {i}: states shape {tr.states.shape}, expected {(T + 1, self.obs_dim)}")
        want = (T,) if self.action_kind == "discrete" else (T, self.act_dim)
        if tr.actions.shape != want:
            raise DatasetError(f"trajectory {i}: actions shape {tr.actions.shape}, expected {want}")
        if tr.rewards.ndim != 1:
            raise DatasetError(f"trajectory {i}: rewards must be 1-D")
        if not (np.all(np.isfinite(tr.states)) and np.all(np.isfinite(tr.rewards))):
            raise DatasetError(f"trajectory {i}: non-finite values")
        if self.action_kind == "discrete":
            if tr.actions.size and (tr.actions.min() < 0 or tr.actions.max() >= self.n_actions):
                raise DatasetError(f"trajectory {i}: action index out of range")
        elif not np.all(np.isfinite(tr.actions)):
            raise DatasetError(f"trajectory {i}: non-finite actions")

    def append(self, tr: Trajectory) -> None:
        self._check(len(self.trajectories), tr)
        self.trajectories.append(tr)

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def n_transitions(self) -> int:
        return sum(len(t) for t in self.trajectories)

    def encoded_actions(self, tr: Trajectory) -> np.ndarray:
        """Per-step action vectors as seen by networks, shape (T, act_dim)."""
        if self.action_kind == "discrete":
            return action_codes(self.n_actions)[tr.actions][:, None]
        return tr.actions


def save(dataset: TrajectoryDataset, path: str | Path) -> None:
    meta = {
        "kind": "trajectories",
        "version": FORMAT_VERSION,
        "n_trajectories": len(dataset),
        "obs_dim": dataset.obs_dim,
        "act_dim": dataset.act_dim,
        "action_kind": dataset.action_kind,
        "n_actions": dataset.n_actions,
        "lengths": [len(t) for t in dataset.trajectories],
        "terminals": [bool(t.terminal) for t in dataset.trajectories],
    }
    arrays = {}
    for i, tr in enumerate(dataset.trajectories):
        arrays[f"states/{i}"] = tr.states
        arrays[f"actions/{i}"] = tr.actions
        arrays[f"rewards/{i}"] = tr.rewards
    archive.write(path, meta, arrays)


def load(path: str | Path) -> TrajectoryDataset:
    try:
        meta, arrays = archive.read(path)
    except archive.ArchiveError as exc:
        raise DatasetError(str(exc)) from exc
    if meta.get("kind") != "trajectories" or meta.get("version") != FORMAT_VERSION:
        raise DatasetError("not a trajectory dataset file (or unsupported version)")
    try:
        n = meta["n_trajectories"]
        lengths, terminals = meta["lengths"], meta["terminals"]
        ds = TrajectoryDataset(meta["obs_dim"], meta["act_dim"], meta["action_kind"], meta["n_actions"])
    except KeyError as exc:
        raise DatasetError(f"header missing {exc}") from None
    if len(lengths) != n or len(terminals) != n:
        raise DatasetError("header trajectory count disagrees with length/terminal lists")
    for i in range(n):
        try:
            states, actions, rewards = arrays[f"states/{i}"], arrays[f"actions/{i}"], arrays[f"rewards/{i}"]
        except KeyError as exc:
            raise DatasetError(f"missing array {exc}") from None
        if len(rewards) != lengths[i]:
            raise DatasetError(f"trajectory {i}: header length {lengths[i]} != payload {len(rewards)}")
        ds.append(Trajectory(states, actions, rewards, bool(terminals[i])))
    return ds


def intra_return(rewards, gamma1: float) -> float:
    r = np.asarray(rewards, dtype=np.float64)
    return float(r @ gamma1 ** np.arange(len(r)))


@dataclass
class OptionBatch:
    states: np.ndarray  # (B, obs_dim)
    options: np.ndarray  # (B, H * act_dim), encoded and flattened
    returns: np.ndarray  # (B,) intra-option discounted return
    next_states: np.ndarray  # (B, obs_dim)
    mask: np.ndarray  # (B,) 0.0 where the option ends in a terminal state
    traj_ids: np.ndarray  # (B,)
    starts: np.ndarray  # (B,)

    def __len__(self) -> int:
        return len(self.returns)


class OptionSampler:
    """Precomputed table of every option transition ``(s_t, a_{t:t+H-1}, R_hat, s_{t+H})``.

    Valid starts are ``0 <= t <= T - H`` in every trajectory; options never cross
    trajectory boundaries and are never padded.
    """

    def __init__(self, dataset: TrajectoryDataset, H: int, gamma1: float):
        if H < 1:
            raise DatasetError("option length must be >= 1")
        if len(dataset) == 0:
            raise DatasetError("empty dataset")
        short = min(len(t) for t in dataset.trajectories)
        if H > short:
            raise DatasetError(f"option length {H} exceeds shortest trajectory ({short})")
        self.H, self.gamma1 = H, gamma1
        disc = gamma1 ** np.arange(H)
        s, o, ret, s2, mask, tid, start = [], [], [], [], [], [], []
        for i, tr in enumerate(dataset.trajectories):
            T = len(tr)
            n = T - H + 1
            acts = dataset.encoded_actions(tr)
            win = np.lib.stride_tricks.sliding_window_view(np.arange(T), H)
            s.append(tr.states[:n])
            o.append(acts[win].reshape(n, -1))
            ret.append(tr.rewards[win] @ disc)
            s2.append(tr.states[H : H + n])
            m = np.ones(n)
            if tr.terminal:
                m[-1] = 0.0
            mask.append(m)
            tid.append(np.full(n, i))
            start.append(np.arange(n))
        self.states = np.concatenate(s)
        self.options = np.concatenate(o)
        self.returns = np.concatenate(ret)
        self.next_states = np.concatenate(s2)
        self.mask = np.concatenate(mask)
        self.traj_ids = np.concatenate(tid)
        self.starts = np.concatenate(start)

    def __len__(self) -> int:
        return len(self.returns)

    def take(self, idx: np.ndarray) -> OptionBatch:
        return OptionBatch(
            self.states[idx],
            self.options[idx],
            self.returns[idx],
            self.next_states[idx],
            self.mask[idx],
            self.traj_ids[idx],
            self.starts[idx],
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> OptionBatch:
        return self.take(rng.integers(len(self), size=batch_size))


def sample_option_batch(
    dataset: TrajectoryDataset, H: int, gamma1: float, batch_size: int, rng: np.random.Generator
) -> OptionBatch:
    return OptionSampler(dataset, H, gamma1).sample(batch_size, rng)


def returns_to_go(rewards: np.ndarray, H: int, gamma1: float, gamma2: float) -> np.ndarray:
    """Dual-discounted return from every step: H-step chunks discounted by gamma1 inside,
    gamma2**H between chunks; the final chunk may be shorter than H."""
    r = np.asarray(rewards, dtype=np.float64)
    T = len(r)
    disc = gamma1 ** np.arange(H)
    out = np.zeros(T)
    for t in range(T - 1, -1, -1):
        end = min(t + H, T)
        g = r[t:end] @ disc[: end - t]
        if t + H < T:
            g += gamma2**H * out[t + H]
        out[t] = g
    return out


def return_statistics(dataset: TrajectoryDataset, gamma1: float, gamma2: float, H: int) -> dict:
    if len(dataset) == 0 or dataset.n_transitions == 0:
        raise DatasetError("empty dataset")
    rewards = np.concatenate([t.rewards for t in dataset.trajectories])
    rtg = np.concatenate([returns_to_go(t.rewards, H, gamma1, gamma2) for t in dataset.trajectories])
    return {"r_min": float(rewards.min()), "r_max": float(rewards.max()), "returns": rtg}
