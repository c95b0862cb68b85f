import numpy as np
import pytest
from scipy.stats import norm

from seqvalue import nn
from seqvalue.dataset import OptionBatch
from seqvalue.policy import (
    AdvantageWeighted,
    BehaviorCloning,
    DeterministicPGWithBC,
    SequencePolicy,
    awr_loss,
    bc_loss,
    best_of_n,
    dpg_bc_loss,
    make_extractor,
    select_index,
    weighted_nll,
)

OBS, H, ACT = 3, 2, 2


def make_policy(seed=0, **kw):
    return SequencePolicy.create(OBS, H, ACT, (16,), np.random.default_rng(seed), **kw)


def batch_of(states, options):
    B = len(states)
    z = np.zeros(B)
    return OptionBatch(np.asarray(states, float), np.asarray(options, float), z, np.asarray(states, float), z + 1,
                       z.astype(int), z.astype(int))


def nll_oracle(policy, states, options):
    """Squashed-Gaussian negative log density via scipy's normal log-pdf and the tanh Jacobian."""
    mu = nn.forward(policy.params.net, states)
    std = np.exp(np.clip(policy.params.log_std, -5, 2))
    u = np.arctanh(options)
    return -(norm.logpdf(u, mu, std) - np.log(1 - options**2)).sum(axis=1)


class QuadCritic:
    """Q(s, o) = -|o|^2."""

    def q_value(self, states, options, target=False):
        return -np.sum(np.asarray(options) ** 2, axis=-1)

    def q_value_and_action_grad(self, states, options):
        return self.q_value(states, options), -2.0 * options


class ConstCritic(QuadCritic):
    def q_value(self, states, options, target=False):
        return np.full(len(options), 2.5)

    def v_value(self, states):
        return np.full(len(states), 2.5)

    def q_value_and_action_grad(self, states, options):
        return self.q_value(states, options), np.zeros_like(options)


class TableCritic:
    def __init__(self, q, v):
        self.q, self.v = np.asarray(q, float), np.asarray(v, float)

    def q_value(self, states, options, target=False):
        return self.q

    def v_value(self, states):
        return self.v


def fit(policy, batch, extractor, learner=None, steps=600, lr=1e-2):
    opt = nn.AdamState.for_params(policy.params, lr=lr)
    for _ in range(steps):
        _, g = extractor.loss_and_grads(policy, batch, learner)
        nn.adam_step(opt, policy.params, g)


# sampling -----------------------------------------------------------------


def test_min_log_std_nearly_deterministic():
    pol = make_policy(init_log_std=-20.0)
    pol.params.net.layers[-1].weight[...] = 0.0
    x = pol.sample_n(np.zeros(OBS), 2000, np.random.default_rng(0))
    # log-std is floored at -5, i.e. std 6.7e-3: the typical sample sits well inside 0.01
    assert np.median(np.abs(x)) <= 0.01
    assert np.max(np.abs(x)) <= 0.05


def test_log_prob_finite_on_samples():
    pol = make_policy(init_log_std=1.5)
    s = np.random.default_rng(1).normal(size=(10_000, OBS)) * 3
    o = pol.sample(s, np.random.default_rng(2))
    assert np.all(np.isfinite(pol.log_prob(s, o)))


def test_monte_carlo_mean_matches_quadrature():
    pol = make_policy(seed=3, init_log_std=-0.5)
    s = np.array([0.3, -1.0, 0.7])
    mu = pol.pre_mean(s[None])[0]
    std = np.exp(-0.5)
    z, w = np.polynomial.hermite_e.hermegauss(80)
    exact = np.array([np.sum(w * np.tanh(m + std * z)) / np.sqrt(2 * np.pi) for m in mu])
    n = 200_000
    x = pol.sample_n(s, n, np.random.default_rng(4))
    assert np.all(np.abs(x.mean(axis=0) - exact) <= 3 * x.std(axis=0) / np.sqrt(n))


def test_sample_n_prefix_property():
    pol = make_policy(seed=5)
    s = np.ones(OBS)
    a = pol.sample_n(s, 10, np.random.default_rng(6))
    b = pol.sample_n(s, 4, np.random.default_rng(6))
    assert np.array_equal(a[:4], b)


# behavior cloning -----------------------------------------------------------


def test_bc_nll_against_closed_form():
    pol = make_policy(seed=7, init_log_std=-0.3)
    rng = np.random.default_rng(7)
    s, o = rng.normal(size=(6, OBS)), rng.uniform(-0.95, 0.95, (6, H * ACT))
    assert bc_loss(pol, batch_of(s, o)) == pytest.approx(np.mean(nll_oracle(pol, s, o)), rel=1e-12)


def test_bc_point_mass_converges():
    pol = make_policy(seed=8)
    target = np.array([0.5, -0.3, 0.1, 0.8])
    s = np.random.default_rng(8).normal(size=(32, OBS))
    b = batch_of(s, np.tile(target, (32, 1)))
    before = bc_loss(pol, b)
    fit(pol, b, BehaviorCloning())
    assert bc_loss(pol, b) < before
    assert np.max(np.abs(pol.mean_action(s) - target)) <= 0.02


def test_bc_symmetric_pair_centers_at_zero():
    pol = make_policy(seed=9)
    s = np.zeros((2, OBS))
    o = np.array([[0.6, -0.2, 0.4, 0.9], [-0.6, 0.2, -0.4, -0.9]])
    fit(pol, batch_of(s, o), BehaviorCloning(), steps=1500)
    assert np.max(np.abs(pol.pre_mean(s[:1]))) <= 1e-3


def _fd(loss_fn, params, grads, eps=1e-6):
    worst = 0.0
    for p, g in zip(params.arrays(), grads.arrays()):
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + eps
            up = loss_fn()
            p[idx] = old - eps
            dn = loss_fn()
            p[idx] = old
            num = (up - dn) / (2 * eps)
            worst = max(worst, abs(num - g[idx]) / max(abs(num), abs(g[idx]), 1e-6))
    return worst


def test_weighted_nll_gradient():
    pol = make_policy(seed=10, init_log_std=-0.2)
    rng = np.random.default_rng(10)
    s, o, w = rng.normal(size=(5, OBS)), rng.uniform(-0.9, 0.9, (5, H * ACT)), rng.uniform(0, 2, 5)
    _, g = weighted_nll(pol, s, o, w)
    assert _fd(lambda: weighted_nll(pol, s, o, w)[0], pol.params, g) <= 1e-4


# advantage weighting --------------------------------------------------------


def test_awr_zero_advantage_is_bc():
    pol = make_policy(seed=11)
    rng = np.random.default_rng(11)
    b = batch_of(rng.normal(size=(8, OBS)), rng.uniform(-0.9, 0.9, (8, H * ACT)))
    assert awr_loss(pol, b, ConstCritic()) == bc_loss(pol, b)


def test_awr_weight_clip():
    assert AdvantageWeighted(max_weight=100.0).weights(np.array([1e4]))[0] == 100.0


def test_awr_three_samples():
    pol = make_policy(seed=12)
    rng = np.random.default_rng(12)
    s, o = rng.normal(size=(3, OBS)), rng.uniform(-0.9, 0.9, (3, H * ACT))
    q, v = [1.0, -0.5, 6.0], [0.2, 0.3, 0.1]
    w = [np.exp(0.8), np.exp(-0.8), min(np.exp(5.9), 100.0)]
    ref = np.mean(np.array(w) * nll_oracle(pol, s, o))
    assert awr_loss(pol, batch_of(s, o), TableCritic(q, v)) == pytest.approx(ref, rel=1e-12)


# deterministic policy gradient with BC ------------------------------------------


def test_dpg_huge_alpha_is_bc():
    pol = make_policy(seed=13)
    target = np.array([0.3, -0.6, 0.2, 0.5])
    s = np.random.default_rng(13).normal(size=(32, OBS))
    fit(pol, batch_of(s, np.tile(target, (32, 1))), DeterministicPGWithBC(1e6), QuadCritic(), steps=800, lr=3e-3)
    assert np.mean((pol.mean_action(s) - target) ** 2) <= 1e-3


def test_dpg_flat_critic_has_no_q_gradient():
    pol = make_policy(seed=14)
    rng = np.random.default_rng(14)
    b = batch_of(rng.normal(size=(6, OBS)), rng.uniform(-0.9, 0.9, (6, H * ACT)))
    _, g1 = DeterministicPGWithBC(1.0).loss_and_grads(pol, b, ConstCritic())
    _, g2 = DeterministicPGWithBC(2.0).loss_and_grads(pol, b, ConstCritic())
    assert all(np.allclose(2 * x, y, atol=1e-15) for x, y in zip(g1.arrays(), g2.arrays()))


def test_dpg_quadratic_critic_optimum_at_zero():
    pol = make_policy(seed=15)
    s = np.random.default_rng(15).normal(size=(16, OBS))
    b = batch_of(s, np.random.default_rng(16).uniform(-0.9, 0.9, (16, H * ACT)))
    fit(pol, b, DeterministicPGWithBC(0.0), QuadCritic(), steps=1000, lr=3e-3)
    assert np.max(np.abs(pol.mean_action(s))) <= 0.05


def test_dpg_gradient():
    pol = make_policy(seed=17)
    rng = np.random.default_rng(17)
    b = batch_of(rng.normal(size=(5, OBS)), rng.uniform(-0.9, 0.9, (5, H * ACT)))
    ex = DeterministicPGWithBC(0.7)
    crit = QuadCritic()
    _, g = ex.loss_and_grads(pol, b, crit)
    # the Q normalizer mean|Q| is a constant in the gradient, as in TD3+BC
    scale = np.mean(np.abs(crit.q_value(None, pol.mean_action(b.states)))) + 1e-8

    def loss():
        mu = pol.mean_action(b.states)
        return -np.mean(crit.q_value(None, mu)) / scale + 0.7 * np.mean((mu - b.options) ** 2)

    assert loss() == pytest.approx(dpg_bc_loss(pol, b, crit, 0.7), rel=1e-12)
    assert _fd(loss, pol.params.net, g.net) <= 1e-4


def test_make_extractor():
    assert make_extractor("bc").name == "bc"
    assert make_extractor("awr", temperature=2.0).temperature == 2.0
    assert make_extractor("dpg_bc", alpha=3.0).alpha == 3.0
    with pytest.raises(ValueError):
        make_extractor("flow")


# best-of-N --------------------------------------------------------------------


def test_best_of_one_is_the_sample():
    pol = make_policy(seed=18)
    s = np.ones(OBS)
    seq, _ = best_of_n(pol, QuadCritic(), s, 1, "softmax", 1.0, np.random.default_rng(3))
    assert np.array_equal(seq, pol.sample_n(s, 1, np.random.default_rng(3))[0])


def test_greedy_ties_pick_first():
    assert select_index(np.zeros(5), "greedy", 1.0, np.random.default_rng(0)) == 0


def test_cold_softmax_matches_greedy():
    rng = np.random.default_rng(19)
    agree = 0
    for _ in range(1000):
        q = rng.permutation(10) + rng.uniform(0, 0.5, 10)
        agree += select_index(q, "softmax", 1e-6, rng) == int(np.argmax(q))
    assert agree >= 990


def test_greedy_affine_invariance():
    rng = np.random.default_rng(20)
    for _ in range(100):
        q = rng.normal(size=8)
        a, c = rng.uniform(0.1, 10), rng.normal() * 100
        assert select_index(q, "greedy", 1.0, rng) == select_index(a * q + c, "greedy", 1.0, rng)


def test_greedy_never_below_plain_sample():
    pol = make_policy(seed=21, init_log_std=0.5)
    crit = QuadCritic()
    s = np.ones(OBS)
    for seed in range(50):
        _, q_best = best_of_n(pol, crit, s, 10, "greedy", 1.0, np.random.default_rng(seed))
        plain = pol.sample_n(s, 1, np.random.default_rng(seed))
        assert q_best >= crit.q_value(None, plain)[0]


def test_bad_selection_arguments():
    pol = make_policy()
    with pytest.raises(ValueError):
        best_of_n(pol, QuadCritic(), np.ones(OBS), 0)
    with pytest.raises(ValueError):
        select_index(np.arange(3.0), "argmin", 1.0, np.random.default_rng(0))
