"""Experiment pipeline behind the CLI: data generation, training, evaluation, oracle comparison.

Every function is deterministic in (config, seed, input files).  Random streams
are split by purpose so that, e.g., changing the evaluation budget never
perturbs training.
"""

from __future__ import annotations

import csv
import json
import logging
from pathlib import Path

import numpy as np

from . import dataset as ds_mod
from . import distributional as dist
from .config import RunConfig, dump_config, thread_count
from .envs import PointMassTask, chain_env, collect_play_data, evaluate_policy, policy_agent, scripted_agent, success_fraction
from .learner import Learner, TrainingDiverged
from .oracle import enumerate_options, oracle_expectile_v
from .policy import best_of_n, make_extractor

log = logging.getLogger(__name__)

STREAMS = {"data": 0, "init": 1, "train": 2, "eval": 3}
METRIC_COLUMNS = [
    "step", "loss_v", "loss_q", "loss_pi", "mean_q", "mean_v",
    "eval_return", "eval_success", "max_projection_error",
]


class PipelineError(RuntimeError):
    pass


def stream(seed: int, purpose: str, *extra: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(STREAMS[purpose], *extra)))


def build_env(cfg: RunConfig):
    e = cfg.env
    if e.kind == "chain":
        return chain_env(e.K, e.steps_per_subtask, e.n_actions, e.horizon, e.observation)
    return PointMassTask(horizon=e.horizon)


def gen_data(cfg: RunConfig) -> dict:
    env = build_env(cfg)
    data = collect_play_data(env, cfg.n_trajectories, cfg.noise, stream(cfg.seed, "data"))
    path = Path(cfg.dataset)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        ds_mod.save(data, path)
    except OSError as exc:
        raise PipelineError(f"cannot write dataset to {path}: {exc}") from exc
    summary = {
        "dataset": str(path),
        "n_trajectories": len(data),
        "n_transitions": data.n_transitions,
        "success_fraction": success_fraction(env, data),
    }
    if len(data) and data.n_transitions:
        st = ds_mod.return_statistics(data, cfg.gamma1, cfg.gamma2, cfg.H)
        summary.update(r_min=st["r_min"], r_max=st["r_max"])
    return summary


def build_support(cfg: RunConfig, data: ds_mod.TrajectoryDataset) -> dist.SupportGrid:
    st = ds_mod.return_statistics(data, cfg.gamma1, cfg.gamma2, cfg.H)
    if cfg.support_mode == "universal":
        lo, hi = dist.universal_support(st["r_min"], st["r_max"], cfg.H, cfg.env.horizon, cfg.gamma1, cfg.gamma2)
        lo, hi = dist.widen(lo, hi)
    else:
        lo, hi = dist.data_centric_support(st["returns"])
    return dist.make_support(lo, hi, cfg.n_atoms)


def make_learner(cfg: RunConfig, data: ds_mod.TrajectoryDataset) -> Learner:
    extractor = make_extractor(
        cfg.extractor, alpha=cfg.alpha, temperature=cfg.awr_temperature, max_weight=cfg.awr_max_weight
    )
    grid = build_support(cfg, data)
    return Learner(cfg.learner_config(), data.obs_dim, data.act_dim, grid, stream(cfg.seed, "init"), extractor)


def _fmt(x) -> str:
    return str(x) if isinstance(x, (int, np.integer)) else format(float(x), ".17g")


def evaluate_learner(cfg: RunConfig, learner: Learner, env, *, mode=None, n=None, beta=None,
                     episodes=None, seed=None, tag: int = 0) -> dict:
    agent = policy_agent(
        env, learner.policy, learner,
        mode=mode or cfg.eval_mode, n=n or cfg.eval_n, beta=beta or cfg.eval_beta,
    )
    rng = stream(cfg.seed if seed is None else seed, "eval", tag)
    return evaluate_policy(env, agent, cfg.eval_episodes if episodes is None else episodes, rng, thread_count())


def train(cfg: RunConfig, data: ds_mod.TrajectoryDataset | None = None) -> dict:
    """Run the full training loop and write checkpoints plus ``metrics.csv`` to ``output_dir``.

    Checkpoints ``ckpt_<step>.seqv`` are written at step 0, at every evaluation
    and at the step budget; the last one is the final checkpoint.
    """
    if data is None:
        data = ds_mod.load(cfg.dataset)
    env = build_env(cfg)
    if env.obs_dim != data.obs_dim or env.act_dim != data.act_dim:
        raise PipelineError("dataset dimensions do not match the configured environment")
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    learner = make_learner(cfg, data)
    sampler = ds_mod.OptionSampler(data, cfg.H, cfg.gamma1)
    rng = stream(cfg.seed, "train")

    ckpt = out / f"ckpt_{0:07d}.seqv"
    learner.save(ckpt)
    last_good = ckpt
    rows = []
    acc: dict[str, list[float]] = {k: [] for k in METRIC_COLUMNS[1:6]}
    metrics_path = out / "metrics.csv"
    with open(metrics_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRIC_COLUMNS)
        for step in range(1, cfg.steps + 1):
            try:
                m = learner.train_step(sampler.sample(cfg.batch_size, rng), rng)
            except TrainingDiverged as exc:
                raise PipelineError(f"{exc}; last good checkpoint: {last_good}") from exc
            for k in acc:
                acc[k].append(m[k])
            if step % cfg.eval_interval == 0 or step == cfg.steps:
                ev = evaluate_learner(cfg, learner, env, tag=step)
                row = [step] + [float(np.mean(acc[k])) for k in acc]
                row += [ev["mean_return"], ev["success_rate"], learner.max_projection_error]
                writer.writerow([_fmt(x) for x in row])
                fh.flush()
                rows.append(dict(zip(METRIC_COLUMNS, row)))
                acc = {k: [] for k in acc}
                ckpt = out / f"ckpt_{step:07d}.seqv"
                learner.save(ckpt)
                last_good = ckpt
                log.info("step %d  loss_v %.4g  loss_q %.4g  success %.3f", step, row[1], row[2], row[7])
    return {"final_checkpoint": str(last_good), "metrics": str(metrics_path), "rows": rows, "learner": learner}


def load_metrics(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items()} for row in csv.DictReader(fh)]


def last_k_average(path: str | Path, k: int = 3, column: str = "eval_success") -> float:
    """Average of ``column`` over the last ``k`` evaluation rows of a metrics file."""
    rows = load_metrics(path)
    if not rows:
        raise PipelineError("metrics file has no rows")
    return float(np.mean([r[column] for r in rows[-k:]]))


def evaluate(cfg: RunConfig, checkpoint: str | Path | None, *, mode=None, n=None, beta=None,
             episodes=None, seed=None) -> dict:
    """Evaluate a checkpoint, or the scripted optimum when ``checkpoint`` is None."""
    env = build_env(cfg)
    episodes = cfg.eval_episodes if episodes is None else episodes
    seed = cfg.seed if seed is None else seed
    if checkpoint is None:
        stats = evaluate_policy(env, scripted_agent(env, cfg.H), episodes, stream(seed, "eval"), thread_count())
        return {**stats, "policy": "scripted", "seed": seed}
    learner = Learner.load(checkpoint)
    if learner.obs_dim != env.obs_dim or learner.act_dim != env.act_dim:
        raise PipelineError(
            f"checkpoint expects obs_dim={learner.obs_dim}, act_dim={learner.act_dim}; "
            f"environment has {env.obs_dim}, {env.act_dim}"
        )
    mode = mode or cfg.eval_mode
    n = n or cfg.eval_n
    beta = beta or cfg.eval_beta
    selected: list[float] = []
    base = policy_agent(env, learner.policy, learner, mode=mode, n=n, beta=beta)

    def agent(obs, state, rng):
        seq = base(obs, state, rng)
        selected.append(float(learner.q_value(obs[None, :], seq[None, :])[0]))
        return seq

    stats = evaluate_policy(env, agent, episodes, stream(seed, "eval"), 1)
    return {**stats, "mode": mode, "n": n, "beta": beta, "seed": seed,
            "mean_selected_q": float(np.mean(selected)) if selected else float("nan")}


def selected_q_on_states(learner: Learner, env, states: np.ndarray, *, mode: str, n: int, beta: float = 1.0,
                         seed: int = 0) -> np.ndarray:
    """Critic score of the sequence chosen at each state; state ``i`` always uses child seed ``i``,
    so different modes or candidate counts see the same candidate draws."""
    out = np.empty(len(states))
    for i, s in enumerate(states):
        rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(i,)))
        if mode == "sample":
            seq = env.canonicalize(learner.policy.sample_n(s, 1, rng))
        else:
            seq = best_of_n(learner.policy, learner, s, n, mode, beta, rng, env.canonicalize)[0]
        # rescore alone: batched matmuls round differently for different N
        out[i] = learner.q_value(s[None, :], np.atleast_2d(seq))[0]
    return out


def compare_to_oracle(env, learned_v: np.ndarray, learned_q: np.ndarray, table: dict, v_range: float) -> dict:
    cov = table["covered"]
    used = table["counts"] > 0
    dv = np.abs(learned_v[cov] - table["V"][cov])
    dq = np.abs(learned_q[used] - table["Q"][used])
    return {
        "covered_states": int(cov.sum()),
        "covered_pairs": int(used.sum()),
        "v_gap_mean": float(dv.mean()),
        "v_gap_max": float(dv.max()),
        "q_gap_mean": float(dq.mean()),
        "q_gap_max": float(dq.max()),
        "q_overshoot_mean": float(np.mean(learned_q[used] - table["Q"][used])),
        "support_range": float(v_range),
    }


def learned_tables(env, learner: Learner, H: int) -> tuple[np.ndarray, np.ndarray]:
    """Learned V over all states and Q over every (state, option) pair of a tabular task."""
    seqs = enumerate_options(env.n_actions, H)
    codes = env.encode(seqs).reshape(len(seqs), -1)
    S, O = env.n_states, len(seqs)
    states = np.repeat(env.obs_table, O, axis=0)
    q = learner.q_value(states, np.tile(codes, (S, 1))).reshape(S, O)
    return learner.v_value(env.obs_table), q


def oracle_table(cfg: RunConfig, data: ds_mod.TrajectoryDataset | None = None) -> dict:
    env = build_env(cfg)
    if data is None:
        data = ds_mod.load(cfg.dataset)
    return oracle_expectile_v(env, data, cfg.H, cfg.gamma1, cfg.gamma2, cfg.tau)


def oracle_check(cfg: RunConfig, checkpoint: str | Path, *, mean_tol: float = 0.05, max_tol: float = 0.15,
                 table_out: str | Path | None = None) -> dict:
    """Gap between a trained checkpoint and the exact in-sample expectile values.

    Tolerances are fractions of the support range ``v_max - v_min``.
    """
    env = build_env(cfg)
    if cfg.env.kind != "chain" or cfg.env.observation != "full":
        raise PipelineError("oracle comparison needs a fully observed tabular task")
    data = ds_mod.load(cfg.dataset)
    table = oracle_table(cfg, data)
    learner = Learner.load(checkpoint)
    if learner.config.H != cfg.H:
        raise PipelineError("checkpoint option length differs from config")
    v, q = learned_tables(env, learner, cfg.H)
    rng_ = learner.grid.v_max - learner.grid.v_min
    report = compare_to_oracle(env, v, q, table, rng_)
    report["passed"] = bool(report["v_gap_mean"] <= mean_tol * rng_ and report["v_gap_max"] <= max_tol * rng_)
    if table_out is not None:
        write_oracle_table(table, table_out)
    return report


def write_oracle_table(table: dict, path: str | Path) -> None:
    def clean(a):
        return [None if not np.isfinite(x) else float(x) for x in np.ravel(a)]

    payload = {
        "V": clean(table["V"]),
        "Q": [clean(row) for row in table["Q"]],
        "covered": [bool(c) for c in table["covered"]],
    }
    Path(path).write_text(json.dumps(payload, indent=1, sort_keys=True))


def dataset_stats(path: str | Path, gamma1: float, gamma2: float, H: int, horizon: int | None = None) -> dict:
    data = ds_mod.load(path)
    st = ds_mod.return_statistics(data, gamma1, gamma2, H)
    q01, q50, q99 = np.quantile(st["returns"], [0.01, 0.5, 0.99])
    out = {
        "n_trajectories": len(data),
        "n_transitions": data.n_transitions,
        "r_min": st["r_min"],
        "r_max": st["r_max"],
        "return_q01": float(q01),
        "return_q50": float(q50),
        "return_q99": float(q99),
        "data_centric_support": list(dist.data_centric_support(st["returns"])),
    }
    if horizon is not None:
        out["universal_support"] = list(
            dist.widen(*dist.universal_support(st["r_min"], st["r_max"], H, horizon, gamma1, gamma2))
        )
    return out
