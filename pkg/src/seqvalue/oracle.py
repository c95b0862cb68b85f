"""Exact reference values for tabular tasks: SMDP Q-iteration and the in-sample expectile fixed point."""

from __future__ import annotations

import itertools

import numpy as np

from .dataset import TrajectoryDataset
from .envs import TabularMDP

MAX_OPTIONS = 10**6


class OracleError(ValueError):
    """The oracle cannot be computed for this input."""


def enumerate_options(n_actions: int, H: int) -> np.ndarray:
    """All action sequences, shape (n_actions**H, H); row ``i`` is ``i`` written in base n_actions."""
    n = n_actions**H
    if n > MAX_OPTIONS:
        raise OracleError(f"{n} option sequences exceed the enumeration budget of {MAX_OPTIONS}")
    return np.array(list(itertools.product(range(n_actions), repeat=H)), dtype=np.int64).reshape(n, H)


def option_index(seqs: np.ndarray, n_actions: int) -> np.ndarray:
    seqs = np.atleast_2d(np.asarray(seqs, dtype=np.int64))
    H = seqs.shape[1]
    return seqs @ (n_actions ** np.arange(H - 1, -1, -1))


def option_model(mdp: TabularMDP, H: int, gamma1: float) -> tuple[np.ndarray, np.ndarray]:
    """Expected intra-option return ``R_hat[s, o]`` and landing distribution ``P_H[s, o, s']``."""
    seqs = enumerate_options(mdp.n_actions, H)
    S, O = mdp.n_states, len(seqs)
    if S * O * S > 5 * 10**7:
        raise OracleError("option model too large to tabulate")
    dist = np.broadcast_to(np.eye(S)[:, None, :], (S, O, S)).copy()
    r_hat = np.zeros((S, O))
    for k in range(H):
        a = seqs[:, k]
        r_hat += gamma1**k * np.einsum("sox,xo->so", dist, mdp.R[:, a])
        # P[:, a, :] for each option's k-th action: (S, O, S)
        step = mdp.P[:, a, :]
        dist = np.einsum("sox,xoy->soy", dist, step)
    return r_hat, dist


def oracle_smdp_q(mdp: TabularMDP, H: int, gamma1: float, gamma2: float, tol: float = 1e-10,
                  max_iter: int = 1_000_000) -> np.ndarray:
    """Fixed point of ``Q(s,o) = R_hat(s,o) + gamma2**H E[max_o' Q(s', o')]``; shape (S, A**H)."""
    r_hat, dist = option_model(mdp, H, gamma1)
    disc = gamma2**H
    q = np.zeros_like(r_hat)
    for _ in range(max_iter):
        q_new = r_hat + disc * dist @ q.max(axis=1)
        if np.max(np.abs(q_new - q)) <= tol:
            return q_new
        q = q_new
    raise OracleError("SMDP value iteration did not converge")


def expectile(values, tau: float, weights=None) -> float:
    """Exact tau-expectile of a weighted finite sample.

    Solves ``sum_i w_i |tau - 1(x_i < v)| (x_i - v) = 0``.  The left side is
    continuous, piecewise linear and strictly decreasing in ``v``, so the root is
    found by locating the bracketing pair of sorted sample points and solving the
    linear piece in closed form.
    """
    x = np.asarray(values, dtype=np.float64).ravel()
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=np.float64).ravel()
    keep = w > 0
    x, w = x[keep], w[keep]
    if x.size == 0:
        raise OracleError("expectile of an empty sample")
    if not 0.0 < tau < 1.0:
        return float(x.max() if tau >= 1.0 else x.min())
    order = np.argsort(x)
    x, w = x[order], w[order]
    ux = np.unique(x)

    def fo(v):
        a = np.where(x < v, 1.0 - tau, tau) * w
        return float(np.sum(a * (x - v)))

    # fo is linear between consecutive distinct sample points: fo(v) = c0 - c1 * v
    lo, hi = 0, len(ux) - 1
    if fo(ux[hi]) >= 0.0:
        return float(ux[hi])
    if fo(ux[lo]) <= 0.0:
        return float(ux[lo])
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fo(ux[mid]) > 0.0:
            lo = mid
        else:
            hi = mid
    # inside (ux[lo], ux[hi]) points <= ux[lo] carry weight 1 - tau, the rest tau
    a = np.where(x <= ux[lo], 1.0 - tau, tau) * w
    return float(np.sum(a * x) / np.sum(a))


def dataset_option_counts(mdp: TabularMDP, dataset: TrajectoryDataset, H: int) -> np.ndarray:
    """``counts[s, o]``: occurrences of option ``o`` started from state ``s`` at every valid start."""
    if dataset.action_kind != "discrete" or dataset.n_actions != mdp.n_actions:
        raise OracleError("dataset actions do not match the tabular task")
    counts = np.zeros((mdp.n_states, mdp.n_actions**H))
    for tr in dataset.trajectories:
        T = len(tr)
        if T < H:
            continue
        states = np.array([mdp.state_of(o) for o in tr.states[: T - H + 1]])
        windows = np.lib.stride_tricks.sliding_window_view(tr.actions, H)
        np.add.at(counts, (states, option_index(windows, mdp.n_actions)), 1.0)
    return counts


def oracle_expectile_v(
    mdp: TabularMDP,
    dataset: TrajectoryDataset,
    H: int,
    gamma1: float,
    gamma2: float,
    tau: float,
    tol: float = 1e-8,
    max_iter: int = 1_000_000,
) -> dict:
    """In-sample expectile value fixed point.

    ``V(s) = expectile_tau over dataset options o at s (frequency weighted) of
    R_hat(s,o) + gamma2**H E[V(s')]``.  States without dataset options are left
    out (``covered`` is False and ``V`` is NaN there).

    Returns a dict with ``V`` (S,), ``Q`` (S, O) for covered pairs (NaN elsewhere),
    ``counts`` and ``covered``.
    """
    counts = dataset_option_counts(mdp, dataset, H)
    covered = counts.sum(axis=1) > 0
    if not covered.any():
        raise OracleError("dataset covers no state")
    r_hat, dist = option_model(mdp, H, gamma1)
    used = counts > 0
    reach = (dist[used] > 0).any(axis=0)
    if np.any(reach & ~covered):
        missing = np.nonzero(reach & ~covered)[0].tolist()
        raise OracleError(f"dataset options land in states with no dataset options: {missing}")
    disc = gamma2**H
    v = np.zeros(mdp.n_states)
    rows = [(s, np.nonzero(used[s])[0]) for s in np.nonzero(covered)[0]]
    for _ in range(max_iter):
        q = r_hat + disc * dist @ v
        v_new = v.copy()
        for s, opts in rows:
            v_new[s] = expectile(q[s, opts], tau, counts[s, opts])
        delta = np.max(np.abs(v_new - v))
        v = v_new
        if delta <= tol:
            break
    else:
        raise OracleError("expectile iteration did not converge")
    q = np.where(used, r_hat + disc * dist @ v, np.nan)
    return {"V": np.where(covered, v, np.nan), "Q": q, "counts": counts, "covered": covered}
