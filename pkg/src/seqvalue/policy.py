"""Squashed-Gaussian action-sequence policy and policy-extraction objectives.

The policy maps a state to a pre-squash mean over the flattened H-step sequence;
the log standard deviation is a free, state-independent vector.  Extraction
objectives only ever produce gradients for the policy: critic and value heads
are read as constants.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, is_dataclass
from typing import TYPE_CHECKING, Callable, Protocol

import numpy as np

from . import nn

if TYPE_CHECKING:
    from .dataset import OptionBatch
    from .learner import Learner

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
SQUASH_EPS = 1e-6
_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class PolicyParams:
    net: nn.MlpParams
    log_std: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return self.net.arrays() + [self.log_std]

    def copy(self) -> PolicyParams:
        return PolicyParams(self.net.copy(), self.log_std.copy())


class SequencePolicy:
    def __init__(self, params: PolicyParams, H: int, act_dim: int):
        if params.net.out_dim != H * act_dim or params.log_std.shape != (H * act_dim,):
            raise nn.ShapeError("policy head width must equal H * act_dim")
        self.params, self.H, self.act_dim = params, H, act_dim

    @classmethod
    def create(
        cls, obs_dim: int, H: int, act_dim: int, hidden: tuple[int, ...], rng: np.random.Generator,
        init_log_std: float = 0.0,
    ) -> SequencePolicy:
        net = nn.init_mlp([obs_dim, *hidden, H * act_dim], rng, final_scale=0.1)
        return cls(PolicyParams(net, np.full(H * act_dim, init_log_std)), H, act_dim)

    @property
    def dim(self) -> int:
        return self.H * self.act_dim

    @property
    def log_std(self) -> np.ndarray:
        return np.clip(self.params.log_std, LOG_STD_MIN, LOG_STD_MAX)

    def pre_mean(self, states: np.ndarray) -> np.ndarray:
        return nn.forward(self.params.net, states)

    def mean_action(self, states: np.ndarray) -> np.ndarray:
        return np.tanh(self.pre_mean(states))

    def sample(self, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """One reparameterized squashed sample per state."""
        mu = self.pre_mean(states)
        return np.tanh(mu + np.exp(self.log_std) * rng.standard_normal(mu.shape))

    def sample_n(self, state: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
        """``n`` samples for a single state, shape (n, dim).

        Noise is drawn row by row from one stream, so the first k rows of an
        n-sample call equal a k-sample call on the same generator state.
        """
        mu = self.pre_mean(np.asarray(state)[None, :])[0]
        return np.tanh(mu + np.exp(self.log_std) * rng.standard_normal((n, self.dim)))

    def log_prob(self, states: np.ndarray, options: np.ndarray) -> np.ndarray:
        o = np.clip(np.asarray(options, dtype=np.float64), -1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS)
        single = o.ndim == 1
        mu = self.pre_mean(states)
        if single:
            o, mu = o[None, :], np.atleast_2d(mu)
        log_std = self.log_std
        z = (np.arctanh(o) - mu) * np.exp(-log_std)
        lp = -(0.5 * z * z + log_std + _HALF_LOG_2PI + np.log1p(-o * o)).sum(axis=-1)
        return lp[0] if single else lp


def weighted_nll(policy: SequencePolicy, states, options, weights) -> tuple[float, PolicyParams]:
    """``mean(-w * log pi(o|s))`` and its gradient w.r.t. the policy parameters."""
    o = np.clip(options, -1.0 + SQUASH_EPS, 1.0 - SQUASH_EPS)
    B = len(o)
    mu, cache = nn.forward_cached(policy.params.net, states)
    log_std = policy.log_std
    inv_std = np.exp(-log_std)
    z = (np.arctanh(o) - mu) * inv_std
    nll = (0.5 * z * z + log_std + _HALF_LOG_2PI + np.log1p(-o * o)).sum(axis=-1)
    w = np.asarray(weights, dtype=np.float64)
    loss = float(np.mean(w * nll))
    d_mu = -(w[:, None] * z * inv_std) / B
    d_log_std = ((w[:, None] * (1.0 - z * z)).sum(axis=0)) / B
    inside = (policy.params.log_std >= LOG_STD_MIN) & (policy.params.log_std <= LOG_STD_MAX)
    d_log_std = np.where(inside, d_log_std, 0.0)
    g_net, _ = nn.backward_cached(policy.params.net, cache, d_mu)
    return loss, PolicyParams(g_net, d_log_std)


class Extractor(Protocol):
    name: str

    def loss_and_grads(
        self, policy: SequencePolicy, batch: OptionBatch, learner: Learner
    ) -> tuple[float, PolicyParams]: ...


class BehaviorCloning:
    name = "bc"

    def loss_and_grads(self, policy, batch, learner=None):
        return weighted_nll(policy, batch.states, batch.options, np.ones(len(batch)))


def bc_loss(policy: SequencePolicy, batch: OptionBatch) -> float:
    return BehaviorCloning().loss_and_grads(policy, batch)[0]


@dataclass
class AdvantageWeighted:
    temperature: float = 1.0
    max_weight: float = 100.0
    name: str = "awr"

    def weights(self, advantages: np.ndarray) -> np.ndarray:
        # exp overflow is harmless: the clip caps it
        with np.errstate(over="ignore"):
            return np.minimum(np.exp(np.asarray(advantages) / self.temperature), self.max_weight)

    def loss_and_grads(self, policy, batch, learner):
        adv = learner.q_value(batch.states, batch.options) - learner.v_value(batch.states)
        return weighted_nll(policy, batch.states, batch.options, self.weights(adv))


def awr_loss(policy: SequencePolicy, batch: OptionBatch, learner: Learner, temperature: float = 1.0,
             max_weight: float = 100.0) -> float:
    return AdvantageWeighted(temperature, max_weight).loss_and_grads(policy, batch, learner)[0]


@dataclass
class DeterministicPGWithBC:
    """``-Q(s, mu(s)) / mean|Q| + alpha * MSE(mu(s), o_data)`` on the squashed policy mean."""

    alpha: float = 1.0
    name: str = "dpg_bc"

    def loss_and_grads(self, policy, batch, learner):
        B, D = batch.options.shape
        pre, cache = nn.forward_cached(policy.params.net, batch.states)
        mu = np.tanh(pre)
        q, dq_do = learner.q_value_and_action_grad(batch.states, mu)
        scale = float(np.mean(np.abs(q))) + 1e-8
        diff = mu - batch.options
        loss = float(-np.mean(q) / scale + self.alpha * np.mean(diff * diff))
        d_mu = -dq_do / (scale * B) + self.alpha * 2.0 * diff / (B * D)
        g_net, _ = nn.backward_cached(policy.params.net, cache, d_mu * (1.0 - mu * mu))
        return loss, PolicyParams(g_net, np.zeros_like(policy.params.log_std))


def dpg_bc_loss(policy: SequencePolicy, batch: OptionBatch, learner: Learner, alpha: float) -> float:
    return DeterministicPGWithBC(alpha).loss_and_grads(policy, batch, learner)[0]


def make_extractor(name: str, *, alpha: float = 1.0, temperature: float = 1.0, max_weight: float = 100.0):
    if name == "bc":
        return BehaviorCloning()
    if name == "awr":
        return AdvantageWeighted(temperature, max_weight)
    if name == "dpg_bc":
        return DeterministicPGWithBC(alpha)
    raise ValueError(f"unknown extractor {name!r}")


def extractor_spec(extractor) -> dict:
    """Name plus settings, enough to rebuild the extractor with :func:`extractor_from_spec`."""
    return asdict(extractor) if is_dataclass(extractor) else {"name": extractor.name}


def extractor_from_spec(spec: dict | str):
    kw = {"name": spec} if isinstance(spec, str) else dict(spec)
    name = kw.pop("name")
    kinds = {"bc": BehaviorCloning, "awr": AdvantageWeighted, "dpg_bc": DeterministicPGWithBC}
    if name not in kinds:
        raise ValueError(f"unknown extractor {name!r}")
    return kinds[name](**kw)


def select_index(q: np.ndarray, mode: str, beta: float, rng: np.random.Generator) -> int:
    """Greedy picks the first maximizer; softmax samples proportional to exp(q / beta)."""
    if len(q) == 1:
        return 0
    if mode == "greedy":
        return int(np.argmax(q))
    if mode == "softmax":
        logits = (q - q.max()) / beta
        p = np.exp(logits)
        p /= p.sum()
        return int(rng.choice(len(q), p=p))
    raise ValueError(f"unknown selection mode {mode!r}")


def best_of_n(
    policy: SequencePolicy,
    learner: Learner,
    state: np.ndarray,
    n: int,
    mode: str = "greedy",
    beta: float = 1.0,
    rng: np.random.Generator | None = None,
    canonicalize: Callable[[np.ndarray], np.ndarray] | None = None,
) -> tuple[np.ndarray, float]:
    """Sample ``n`` sequences, score them with the critic, return the chosen one and its Q.

    ``canonicalize`` maps raw samples onto the executable action set (e.g. snapping
    to discrete action codes) before scoring.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = rng if rng is not None else np.random.default_rng()
    cand = policy.sample_n(state, n, rng)
    if canonicalize is not None:
        cand = canonicalize(cand)
    q = learner.q_value(np.repeat(np.asarray(state)[None, :], n, axis=0), cand)
    i = select_index(q, mode, beta, rng)
    return cand[i], float(q[i])
