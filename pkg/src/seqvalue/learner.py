"""Detached value learning over H-step action sequences.

One :meth:`Learner.train_step` performs, in order: a value update toward the
target critics (expectile regression, or its alpha-weighted classification
counterpart), a critic update toward ``R_hat + mask * gamma2**H * V(s_{t+H})``
using the freshly updated value net, one policy-extraction step, and a Polyak
update of the target critics.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import archive, nn
from .dataset import OptionBatch
from .distributional import SupportGrid, dist_mean, log_softmax, project_truncated_normal, softmax
from .policy import BehaviorCloning, PolicyParams, SequencePolicy, extractor_from_spec, extractor_spec


class TrainingDiverged(RuntimeError):
    """A loss became non-finite."""


@dataclass
class LearnerConfig:
    H: int = 4
    gamma1: float = 0.9
    gamma2: float = 0.99
    tau: float = 0.9
    polyak: float = 0.005
    n_atoms: int = 101
    sigma_coef: float = 0.75
    support_mode: str = "universal"
    n_critics: int = 2
    objective: str = "distributional"
    batch_size: int = 128
    lr: float = 3e-4
    grad_clip: float = 10.0
    value_hidden: tuple[int, ...] = (32, 32)
    critic_hidden: tuple[int, ...] = (64, 64)
    actor_hidden: tuple[int, ...] = (64, 64)
    critic_target: str = "detached"  # "coupled": bootstrap from max over policy samples (ablation)
    coupled_samples: int = 10

    def __post_init__(self):
        self.value_hidden = tuple(self.value_hidden)
        self.critic_hidden = tuple(self.critic_hidden)
        self.actor_hidden = tuple(self.actor_hidden)
        if self.H < 1:
            raise ValueError("H must be >= 1")
        if not 0.0 < self.gamma1 <= 1.0:
            raise ValueError("gamma1 must lie in (0, 1]")
        if not 0.0 < self.gamma2 < 1.0:
            raise ValueError("gamma2 must lie in (0, 1)")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if not 0.0 <= self.polyak <= 1.0:
            raise ValueError("polyak rate must lie in [0, 1]")
        if self.objective not in ("scalar", "distributional"):
            raise ValueError(f"unknown objective {self.objective!r}")
        if self.support_mode not in ("universal", "data-centric"):
            raise ValueError(f"unknown support mode {self.support_mode!r}")
        if self.critic_target not in ("detached", "coupled"):
            raise ValueError(f"unknown critic target {self.critic_target!r}")
        if self.n_critics < 1 or self.n_atoms < 2 or self.batch_size < 1:
            raise ValueError("n_critics, n_atoms and batch_size must be positive (n_atoms >= 2)")

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("value_hidden", "critic_hidden", "actor_hidden"):
            d[k] = list(d[k])
        return d


def expectile_loss(u, tau: float):
    u = np.asarray(u, dtype=np.float64)
    return np.where(u < 0.0, 1.0 - tau, tau) * u * u


def expectile_weight(u, tau: float):
    """``|tau - 1(u < 0)|``."""
    return np.where(np.asarray(u) < 0.0, 1.0 - tau, tau)


def bellman_target(returns, v_next, mask, gamma2: float, H: int):
    return np.asarray(returns) + np.asarray(mask) * gamma2**H * np.asarray(v_next)


def cross_entropy(target: np.ndarray, logits: np.ndarray) -> np.ndarray:
    """``-sum_i target_i * log softmax(logits)_i`` along the last axis."""
    return -(target * log_softmax(logits)).sum(axis=-1)


def _finite(value: float, what: str, step: int) -> float:
    if not math.isfinite(value):
        raise TrainingDiverged(f"{what} became non-finite at step {step}")
    return value


class Learner:
    def __init__(
        self,
        config: LearnerConfig,
        obs_dim: int,
        act_dim: int,
        grid: SupportGrid,
        rng: np.random.Generator,
        extractor=None,
    ):
        self.config, self.obs_dim, self.act_dim, self.grid = config, obs_dim, act_dim, grid
        self.extractor = extractor if extractor is not None else BehaviorCloning()
        c = config
        out = c.n_atoms if self.distributional else 1
        if self.distributional and grid.m != c.n_atoms:
            raise ValueError("support bin count does not match n_atoms")
        opt_dim = c.H * act_dim
        self.value = nn.init_mlp([obs_dim, *c.value_hidden, out], rng)
        self.critics = [nn.init_mlp([obs_dim + opt_dim, *c.critic_hidden, out], rng) for _ in range(c.n_critics)]
        self.targets = [p.copy() for p in self.critics]
        self.policy = SequencePolicy.create(obs_dim, c.H, act_dim, c.actor_hidden, rng)
        self.value_opt = nn.AdamState.for_params(self.value, lr=c.lr)
        self.critic_opts = [nn.AdamState.for_params(p, lr=c.lr) for p in self.critics]
        self.policy_opt = nn.AdamState.for_params(self.policy.params, lr=c.lr)
        self.step = 0
        self.max_projection_error = 0.0

    @property
    def distributional(self) -> bool:
        return self.config.objective == "distributional"

    @property
    def sigma(self) -> float:
        return self.config.sigma_coef * self.grid.width

    # heads -------------------------------------------------------------

    def _head_mean(self, out: np.ndarray) -> np.ndarray:
        return dist_mean(softmax(out), self.grid) if self.distributional else out[:, 0]

    def _critic_in(self, states, options) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        options = np.atleast_2d(np.asarray(options, dtype=np.float64))
        if options.shape[1] != self.config.H * self.act_dim:
            raise nn.ShapeError(f"option width {options.shape[1]} != H * act_dim = {self.config.H * self.act_dim}")
        return np.concatenate([states, options], axis=1)

    def v_value(self, states) -> np.ndarray:
        return self._head_mean(nn.forward(self.value, np.atleast_2d(states)))

    def member_q(self, states, options, target: bool = False) -> np.ndarray:
        """Per-member Q, shape (n_critics, B)."""
        x = self._critic_in(states, options)
        nets = self.targets if target else self.critics
        return np.stack([self._head_mean(nn.forward(p, x)) for p in nets])

    def q_value(self, states, options, target: bool = False) -> np.ndarray:
        return self.member_q(states, options, target).min(axis=0)

    def q_value_and_action_grad(self, states, options) -> tuple[np.ndarray, np.ndarray]:
        """Ensemble-min Q of the online critics and its gradient w.r.t. the option vector."""
        x = self._critic_in(states, options)
        qs, grads = [], []
        for p in self.critics:
            out, cache = nn.forward_cached(p, x)
            if self.distributional:
                probs = softmax(out)
                q = probs @ self.grid.centers
                g_out = probs * (self.grid.centers - q[:, None])
            else:
                q = out[:, 0]
                g_out = np.ones_like(out)
            _, g_in = nn.backward_cached(p, cache, g_out)
            qs.append(q)
            grads.append(g_in[:, self.obs_dim :])
        qs = np.stack(qs)
        pick = qs.argmin(axis=0)
        cols = np.arange(x.shape[0])
        return qs[pick, cols], np.stack(grads)[pick, cols]

    # losses ------------------------------------------------------------

    def value_loss(self, batch: OptionBatch) -> tuple[float, nn.MlpParams, np.ndarray]:
        """Loss, gradients w.r.t. the value net, and the pre-update V on the batch."""
        tau = self.config.tau
        x = self._critic_in(batch.states, batch.options)
        B = len(batch)
        target_out = [nn.forward(p, x) for p in self.targets]
        out, cache = nn.forward_cached(self.value, batch.states)
        if not self.distributional:
            q_bar = np.min([o[:, 0] for o in target_out], axis=0)
            u = q_bar - out[:, 0]
            loss = float(np.mean(expectile_loss(u, tau)))
            g = (-2.0 * expectile_weight(u, tau) * u / B)[:, None]
            v = out[:, 0]
        else:
            probs = np.stack([softmax(o) for o in target_out])
            means = probs @ self.grid.centers
            pick = means.argmin(axis=0)
            cols = np.arange(B)
            q_bar, p_target = means[pick, cols], probs[pick, cols]
            v = dist_mean(softmax(out), self.grid)
            alpha = np.where(q_bar >= v, tau, 1.0 - tau)
            loss = float(np.mean(alpha * cross_entropy(p_target, out)))
            g = alpha[:, None] * (softmax(out) - p_target) / B
        grads, _ = nn.backward_cached(self.value, cache, g)
        return loss, grads, v

    def bootstrap_value(self, batch: OptionBatch, rng: np.random.Generator | None = None) -> np.ndarray:
        if self.config.critic_target == "detached":
            return self.v_value(batch.next_states)
        # coupled ablation: max over policy samples at the next state, scored by the target critics
        n = self.config.coupled_samples
        rng = rng if rng is not None else np.random.default_rng(self.step)
        s2 = np.repeat(batch.next_states, n, axis=0)
        cand = self.policy.sample(s2, rng)
        return self.q_value(s2, cand, target=True).reshape(len(batch), n).max(axis=1)

    def critic_loss(self, batch: OptionBatch, rng: np.random.Generator | None = None):
        c = self.config
        y = bellman_target(batch.returns, self.bootstrap_value(batch, rng), batch.mask, c.gamma2, c.H)
        x = self._critic_in(batch.states, batch.options)
        B = len(batch)
        if self.distributional:
            p_y = project_truncated_normal(y, self.sigma, self.grid)
            self.max_projection_error = max(self.max_projection_error, float(np.max(np.abs(p_y.sum(axis=1) - 1.0))))
        total, grads, qs = 0.0, [], []
        for p in self.critics:
            out, cache = nn.forward_cached(p, x)
            if self.distributional:
                total += float(np.mean(cross_entropy(p_y, out)))
                probs = softmax(out)
                g = (probs - p_y) / B
                qs.append(probs @ self.grid.centers)
            else:
                d = out[:, 0] - y
                total += float(np.mean(d * d))
                g = (2.0 * d / B)[:, None]
                qs.append(out[:, 0])
            grads.append(nn.backward_cached(p, cache, g)[0])
        return total, grads, np.min(qs, axis=0)

    # update ------------------------------------------------------------

    def train_step(self, batch: OptionBatch, rng: np.random.Generator | None = None) -> dict:
        c = self.config
        self.step += 1

        loss_v, g_v, v = self.value_loss(batch)
        _finite(loss_v, "value loss", self.step)
        nn.clip_by_global_norm(g_v, c.grad_clip)
        nn.adam_step(self.value_opt, self.value, g_v)

        loss_q, g_qs, q = self.critic_loss(batch, rng)
        _finite(loss_q, "critic loss", self.step)
        for p, g, opt in zip(self.critics, g_qs, self.critic_opts):
            nn.clip_by_global_norm(g, c.grad_clip)
            nn.adam_step(opt, p, g)

        loss_pi, g_pi = self.extractor.loss_and_grads(self.policy, batch, self)
        _finite(loss_pi, "policy loss", self.step)
        nn.clip_by_global_norm(g_pi, c.grad_clip)
        nn.adam_step(self.policy_opt, self.policy.params, g_pi)

        for t, p in zip(self.targets, self.critics):
            nn.polyak_update(t, p, c.polyak)

        return {
            "step": self.step,
            "loss_v": loss_v,
            "loss_q": loss_q,
            "loss_pi": loss_pi,
            "mean_q": float(np.mean(q)),
            "mean_v": float(np.mean(v)),
        }

    # persistence -------------------------------------------------------

    def to_archive(self) -> tuple[dict, dict[str, np.ndarray]]:
        meta = {
            "kind": "learner",
            "config": self.config.to_dict(),
            "grid": self.grid.to_dict(),
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "step": self.step,
            "extractor": extractor_spec(self.extractor),
            "value_sizes": self.value.sizes,
            "critic_sizes": self.critics[0].sizes,
            "actor_sizes": self.policy.params.net.sizes,
            "adam_steps": {
                "value": self.value_opt.t,
                "policy": self.policy_opt.t,
                "critics": [o.t for o in self.critic_opts],
            },
        }
        arrays = nn.params_to_arrays(self.value, "value/")
        for i, (p, t) in enumerate(zip(self.critics, self.targets)):
            arrays.update(nn.params_to_arrays(p, f"critic{i}/"))
            arrays.update(nn.params_to_arrays(t, f"target{i}/"))
        arrays.update(nn.params_to_arrays(self.policy.params.net, "actor/"))
        arrays["actor/log_std"] = self.policy.params.log_std
        opts = [("value", self.value_opt), ("actor", self.policy_opt)]
        opts += [(f"critic{i}", o) for i, o in enumerate(self.critic_opts)]
        for name, opt in opts:
            for j, (m, v) in enumerate(zip(opt.m, opt.v)):
                arrays[f"adam/{name}/m{j}"] = m
                arrays[f"adam/{name}/v{j}"] = v
        return meta, arrays

    def save(self, path: str | Path) -> None:
        meta, arrays = self.to_archive()
        archive.write(path, meta, arrays)

    @classmethod
    def load(cls, path: str | Path, extractor=None) -> Learner:
        meta, arrays = archive.read(path)
        if meta.get("kind") != "learner":
            raise archive.ArchiveError("not a learner checkpoint")
        cfg = meta["config"]
        config = LearnerConfig(**cfg)
        grid = SupportGrid(**meta["grid"])
        self = cls.__new__(cls)
        self.config, self.grid = config, grid
        self.obs_dim, self.act_dim = meta["obs_dim"], meta["act_dim"]
        self.extractor = extractor if extractor is not None else extractor_from_spec(meta.get("extractor", "bc"))
        self.value = nn.params_from_arrays(meta["value_sizes"], arrays, "value/")
        self.critics = [nn.params_from_arrays(meta["critic_sizes"], arrays, f"critic{i}/") for i in range(config.n_critics)]
        self.targets = [nn.params_from_arrays(meta["critic_sizes"], arrays, f"target{i}/") for i in range(config.n_critics)]
        net = nn.params_from_arrays(meta["actor_sizes"], arrays, "actor/")
        self.policy = SequencePolicy(PolicyParams(net, arrays["actor/log_std"]), config.H, self.act_dim)
        if self.value.in_dim != self.obs_dim or self.critics[0].in_dim != self.obs_dim + config.H * self.act_dim:
            raise nn.ShapeError("checkpoint network widths disagree with obs/act dims")

        def opt(name, params, t):
            n = len(params.arrays())
            return nn.AdamState(
                [arrays[f"adam/{name}/m{j}"] for j in range(n)],
                [arrays[f"adam/{name}/v{j}"] for j in range(n)],
                t=t,
                lr=config.lr,
            )

        steps = meta["adam_steps"]
        self.value_opt = opt("value", self.value, steps["value"])
        self.policy_opt = opt("actor", self.policy.params, steps["policy"])
        self.critic_opts = [opt(f"critic{i}", p, steps["critics"][i]) for i, p in enumerate(self.critics)]
        self.step = meta["step"]
        self.max_projection_error = 0.0
        return self
