import numpy as np
import pytest

from seqvalue import archive
from seqvalue import dataset as D


def make_traj(rng, T, obs_dim=3, act_dim=2, terminal=False):
    return D.Trajectory(rng.normal(size=(T + 1, obs_dim)), rng.uniform(-1, 1, (T, act_dim)), rng.normal(size=T), terminal)


def toy_dataset(rng, lengths=(10, 7), terminal_last=False):
    ds = D.TrajectoryDataset(3, 2)
    for i, T in enumerate(lengths):
        ds.append(make_traj(rng, T, terminal=terminal_last and i == len(lengths) - 1))
    return ds


def test_empty_dataset_round_trip(tmp_path):
    D.save(D.TrajectoryDataset(4, 1), tmp_path / "e.seqv")
    ds = D.load(tmp_path / "e.seqv")
    assert len(ds) == 0 and ds.obs_dim == 4


def test_round_trip_two_trajectories(tmp_path):
    ds = toy_dataset(np.random.default_rng(0), terminal_last=True)
    D.save(ds, tmp_path / "d.seqv")
    back = D.load(tmp_path / "d.seqv")
    for a, b in zip(ds.trajectories, back.trajectories):
        assert np.array_equal(a.states, b.states)
        assert np.array_equal(a.actions, b.actions)
        assert np.array_equal(a.rewards, b.rewards)
        assert a.terminal == b.terminal
    D.save(back, tmp_path / "d2.seqv")
    assert (tmp_path / "d.seqv").read_bytes() == (tmp_path / "d2.seqv").read_bytes()


def test_discrete_round_trip(tmp_path):
    ds = D.TrajectoryDataset(2, 1, "discrete", 3)
    ds.append(D.Trajectory(np.zeros((5, 2)), np.array([0, 2, 1, 1]), np.zeros(4)))
    D.save(ds, tmp_path / "d.seqv")
    back = D.load(tmp_path / "d.seqv")
    assert back.trajectories[0].actions.dtype == np.int64
    assert back.trajectories[0].actions.tolist() == [0, 2, 1, 1]


def test_header_obs_dim_mismatch(tmp_path):
    ds = toy_dataset(np.random.default_rng(1))
    D.save(ds, tmp_path / "d.seqv")
    meta, arrays = archive.read(tmp_path / "d.seqv")
    meta["obs_dim"] = 5
    archive.write(tmp_path / "bad.seqv", meta, arrays)
    with pytest.raises(D.DatasetError):
        D.load(tmp_path / "bad.seqv")


def test_truncated_file_rejected(tmp_path):
    D.save(toy_dataset(np.random.default_rng(1)), tmp_path / "d.seqv")
    raw = (tmp_path / "d.seqv").read_bytes()
    (tmp_path / "cut.seqv").write_bytes(raw[:-8])
    with pytest.raises(D.DatasetError):
        D.load(tmp_path / "cut.seqv")


@pytest.mark.parametrize(
    "traj",
    [
        D.Trajectory(np.zeros((4, 3)), np.zeros((4, 2)), np.zeros(4)),
        D.Trajectory(np.zeros((5, 3)), np.zeros((4, 1)), np.zeros(4)),
        D.Trajectory(np.zeros((5, 3)), np.zeros((4, 2)), np.array([0, np.nan, 0, 0])),
    ],
)
def test_invalid_trajectories(traj):
    with pytest.raises(D.DatasetError):
        D.TrajectoryDataset(3, 2).append(traj)


def test_intra_return_cases():
    assert D.intra_return([0, 0, 0], 0.9) == 0.0
    assert D.intra_return([-2.5], 0.3) == -2.5
    assert D.intra_return([-3, -3, -2, -2], 0.9) == pytest.approx(-3 - 2.7 - 1.62 - 1.458, abs=1e-12)


def test_intra_return_recursion_and_linearity():
    rng = np.random.default_rng(2)
    r, s = rng.normal(size=6), rng.normal(size=6)
    g = 0.85
    assert D.intra_return(r, g) == pytest.approx(r[0] + g * D.intra_return(r[1:], g))
    assert D.intra_return(2 * r + s, g) == pytest.approx(2 * D.intra_return(r, g) + D.intra_return(s, g))


def test_option_length_equal_to_trajectory():
    ds = toy_dataset(np.random.default_rng(3), lengths=(6, 6))
    b = D.sample_option_batch(ds, 6, 0.9, 50, np.random.default_rng(0))
    assert np.all(b.starts == 0)


def test_sampling_deterministic():
    ds = toy_dataset(np.random.default_rng(4))
    a = D.sample_option_batch(ds, 3, 0.9, 32, np.random.default_rng(7))
    b = D.sample_option_batch(ds, 3, 0.9, 32, np.random.default_rng(7))
    for f in ("states", "options", "returns", "next_states", "mask", "starts"):
        assert np.array_equal(getattr(a, f), getattr(b, f))


def test_start_histogram_uniform():
    rng = np.random.default_rng(5)
    ds = D.TrajectoryDataset(3, 2, trajectories=[make_traj(rng, 12)])
    H, n = 3, 100_000
    b = D.OptionSampler(ds, H, 0.9).sample(n, np.random.default_rng(6))
    counts = np.bincount(b.starts, minlength=10)
    assert len(counts) == 10  # starts 0..T-H
    p = 1 / 10
    assert np.all(np.abs(counts - n * p) <= 3 * np.sqrt(n * p * (1 - p)))


def test_options_are_contiguous_slices():
    rng = np.random.default_rng(8)
    ds = toy_dataset(rng, lengths=(9, 5, 11), terminal_last=True)
    H, g = 4, 0.8
    sampler = D.OptionSampler(ds, H, g)
    b = sampler.sample(200, rng)
    for i in range(len(b)):
        tr = ds.trajectories[b.traj_ids[i]]
        t = b.starts[i]
        assert t + H <= len(tr)
        assert np.array_equal(b.states[i], tr.states[t])
        assert np.array_equal(b.next_states[i], tr.states[t + H])
        assert np.array_equal(b.options[i], tr.actions[t : t + H].ravel())
        assert b.returns[i] == pytest.approx(D.intra_return(tr.rewards[t : t + H], g))
        last = tr.terminal and t + H == len(tr)
        assert b.mask[i] == (0.0 if last else 1.0)


def test_option_too_long_rejected():
    with pytest.raises(D.DatasetError):
        D.OptionSampler(toy_dataset(np.random.default_rng(0), lengths=(3,)), 4, 0.9)


def test_discrete_actions_encoded():
    ds = D.TrajectoryDataset(1, 1, "discrete", 3)
    ds.append(D.Trajectory(np.zeros((4, 1)), np.array([0, 1, 2]), np.zeros(3)))
    b = D.OptionSampler(ds, 3, 0.9).take(np.array([0]))
    assert np.allclose(b.options[0], [-2 / 3, 0, 2 / 3])
    assert D.decode_actions(b.options[0], 3).tolist() == [0, 1, 2]


def test_return_stats_constant_rewards():
    ds = D.TrajectoryDataset(1, 1, "discrete", 2)
    ds.append(D.Trajectory(np.zeros((6, 1)), np.zeros(5, dtype=np.int64), -np.ones(5)))
    st = D.return_statistics(ds, 0.9, 0.9, 2)
    assert st["r_min"] == st["r_max"] == -1


def test_returns_collapse_when_discounts_match():
    r = np.random.default_rng(9).normal(size=11)
    g = 0.93
    ref = [sum(g**j * r[t + j] for j in range(len(r) - t)) for t in range(len(r))]
    assert np.allclose(D.returns_to_go(r, 3, g, g), ref, atol=1e-12)


def test_returns_backward_recursion():
    r = np.array([0.0, -1.0, -2.0])
    # G2 = -2, G1 = -1 + 0.5 * -2, G0 = 0 + 0.5 * G1
    assert np.allclose(D.returns_to_go(r, 1, 0.123, 0.5), [-1.0, -2.0, -2.0])
