"""Epoch loop: collect, back up the model, fit, fine-tune, roll out, update the policy.

A run directory holds::

    config.ini                 snapshot of the RunConfig
    metrics.csv                one row per epoch, columns in METRIC_COLUMNS
    timing.csv                 wall-clock seconds per epoch
    checkpoints/epoch_NNN.usbp agent and dynamics tensors
    reports/epochs.jsonl       per-epoch record plus the executed event sequence

Wall-clock time lives only in timing.csv so that metrics.csv is reproducible
bit for bit from (config, seed).
"""
from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .dynamics import (VARIANTS, EnsembleDynamics, branch_rollout, estimate_bias, fine_tune,
                       transition_arrays)
from .envs import TabularMDP, make_env, task_spec, termination_fn
from .exceptions import UsageError
from .mdpexact import model_tvd_table
from .nncore.params import write_checkpoint
from .policy import ReplayBuffer, SacAgent, SacConfig, mixed_batch

EVENTS = ("collect", "snapshot", "phase1", "phase2", "rollout", "policy", "evaluate")

METRIC_COLUMNS = (
    "epoch", "env_steps", "model_train_steps", "eval_return_mean", "eval_return_std",
    "shift_before", "bias_before", "shift_after", "bias_after", "objective_delta",
    "holdout_nll", "pred_error_before", "pred_error_after", "delta_probe",
    "env_buffer_size", "model_buffer_size", "policy_updates", "critic_loss", "actor_loss", "alpha",
)


# Configuration ------------------------------------------------------------------

@dataclass(frozen=True)
class ModelConfig:
    n_members: int = 7
    n_elites: int = 5
    hidden: tuple[int, ...] = (200, 200, 200, 200)
    activation: str = "swish"
    lr: float = 1e-3
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 5
    holdout_ratio: float = 0.2
    phase2_lr: float = 1e-4
    phase2_steps: int = 40
    phase2_batch: int = 256
    phase2_pool: int = 2048
    phase2_members: str = "all"
    variant: str = "full"


@dataclass(frozen=True)
class RolloutConfig:
    horizon: int = 1
    horizon_final: int = 1
    schedule_start: int = 0
    schedule_end: int = 1
    batch_size: int = 400

    def horizon_at(self, epoch: int) -> int:
        """Linear schedule from ``horizon`` to ``horizon_final`` over [schedule_start, schedule_end]."""
        if epoch <= self.schedule_start or self.schedule_end <= self.schedule_start:
            return self.horizon if epoch <= self.schedule_start else self.horizon_final
        frac = min(1.0, (epoch - self.schedule_start) / (self.schedule_end - self.schedule_start))
        return int(round(self.horizon + frac * (self.horizon_final - self.horizon)))


@dataclass(frozen=True)
class PolicyConfig:
    hidden: tuple[int, ...] = (64, 64)
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_log_alpha: float = 0.0
    target_entropy: float | None = None
    batch_size: int = 256
    updates_per_step: int = 20

    def sac_config(self) -> SacConfig:
        return SacConfig(self.hidden, self.gamma, self.tau, self.actor_lr, self.critic_lr, self.alpha_lr,
                         self.init_log_alpha, self.target_entropy, self.batch_size)


@dataclass(frozen=True)
class BufferConfig:
    env_capacity: int = 1_000_000
    model_capacity: int = 400_000


@dataclass(frozen=True)
class RunConfig:
    task: str = "pendulum"
    seed: int = 0
    epochs: int = 30
    steps_per_epoch: int = 200
    init_random_steps: int = 200
    eval_episodes: int = 10
    checkpoint_every: int = 0
    real_ratio: float = 0.05
    model: ModelConfig = field(default_factory=ModelConfig)
    rollout: RolloutConfig = field(default_factory=RolloutConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    buffers: BufferConfig = field(default_factory=BufferConfig)

    def __post_init__(self):
        task_spec(self.task)
        m, r, p = self.model, self.rollout, self.policy
        if m.variant not in VARIANTS:
            raise UsageError(f"model.variant must be one of {VARIANTS}, got {m.variant!r}")
        if m.phase2_members not in ("all", "elites"):
            raise UsageError("model.phase2_members must be 'all' or 'elites'")
        rates = {"model.lr": m.lr, "model.phase2_lr": m.phase2_lr, "policy.actor_lr": p.actor_lr,
                 "policy.critic_lr": p.critic_lr, "policy.alpha_lr": p.alpha_lr}
        for name, v in rates.items():
            if not v > 0:
                raise UsageError(f"{name} must be > 0, got {v}")
        if min(r.horizon, r.horizon_final) < 1:
            raise UsageError("rollout horizons must be >= 1")
        if not 0.0 <= self.real_ratio <= 1.0:
            raise UsageError("real_ratio must lie in [0, 1]")
        counts = {"epochs": self.epochs, "steps_per_epoch": self.steps_per_epoch,
                  "eval_episodes": self.eval_episodes, "rollout.batch_size": r.batch_size,
                  "policy.batch_size": p.batch_size, "model.batch_size": m.batch_size,
                  "model.phase2_pool": m.phase2_pool, "buffers.env_capacity": self.buffers.env_capacity,
                  "buffers.model_capacity": self.buffers.model_capacity}
        for name, v in counts.items():
            if v < 1:
                raise UsageError(f"{name} must be >= 1, got {v}")
        if min(self.init_random_steps, self.checkpoint_every, p.updates_per_step, m.phase2_steps) < 0:
            raise UsageError("step counts must be nonnegative")

    def with_overrides(self, **kw) -> "RunConfig":
        """Top-level overrides plus ``variant`` / ``phase2_lr`` shortcuts into the model section."""
        model_kw = {k: kw.pop(k) for k in ("variant", "phase2_lr") if k in kw}
        cfg = replace(self, **kw)
        return replace(cfg, model=replace(cfg.model, **model_kw)) if model_kw else cfg


# Records --------------------------------------------------------------------------

@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    env_steps: int
    model_train_steps: int
    eval_return_mean: float
    eval_return_std: float
    shift_before: float
    bias_before: float
    shift_after: float
    bias_after: float
    objective_delta: float
    holdout_nll: float
    pred_error_before: float
    pred_error_after: float
    delta_probe: float
    env_buffer_size: int
    model_buffer_size: int
    policy_updates: int
    critic_loss: float
    actor_loss: float
    alpha: float
    wall_clock: float = 0.0

    def metric_row(self) -> list[str]:
        # repr round-trips floats exactly
        return [repr(getattr(self, c)) for c in METRIC_COLUMNS]


@dataclass
class RunState:
    config: RunConfig
    env: object
    obs: np.ndarray
    model: EnsembleDynamics
    agent: SacAgent
    env_buffer: ReplayBuffer
    model_buffer: ReplayBuffer
    rngs: dict[str, np.random.Generator]
    eval_seed: int
    epoch: int = 0
    env_steps: int = 0
    phase2_steps: int = 0
    records: list[EpochRecord] = field(default_factory=list)
    events: list[list[str]] = field(default_factory=list)


_STREAMS = ("env", "explore", "model", "agent", "phase2", "rollout", "updates", "probe", "eval")


def init_run(config: RunConfig) -> RunState:
    """Build every component from independent child seeds of ``config.seed``."""
    children = np.random.SeedSequence(config.seed).spawn(len(_STREAMS))
    seeds = {name: int(ss.generate_state(1)[0]) for name, ss in zip(_STREAMS, children)}
    spec = task_spec(config.task)
    env = make_env(config.task, seed=seeds["env"])
    m = config.model
    model = EnsembleDynamics(spec.state_dim, spec.action_dim, n_members=m.n_members, n_elites=m.n_elites,
                             hidden=tuple(m.hidden), activation=m.activation, lr=m.lr,
                             batch_size=m.batch_size, max_epochs=m.max_epochs, patience=m.patience,
                             holdout_ratio=m.holdout_ratio, random_state=seeds["model"]).initialize()
    agent = SacAgent(spec.state_dim, spec.action_dim, config.policy.sac_config(), seed=seeds["agent"])
    rngs = {name: np.random.default_rng(seeds[name]) for name in ("explore", "phase2", "rollout", "updates", "probe")}
    return RunState(config, env, env.reset(), model, agent,
                    ReplayBuffer(config.buffers.env_capacity, spec.state_dim, spec.action_dim),
                    ReplayBuffer(config.buffers.model_capacity, spec.state_dim, spec.action_dim),
                    rngs, seeds["eval"])


# Evaluation and probes ------------------------------------------------------------

def evaluate(agent: SacAgent, task: str, episodes: int = 10, seed=None) -> tuple[float, float]:
    """Mean and population std of undiscounted returns under mean actions.

    Episodes run in lockstep on fresh environments, one batched policy call per step.
    """
    if episodes < 1:
        raise UsageError("episodes must be >= 1")
    seeds = np.random.SeedSequence(seed).spawn(episodes)
    envs = [make_env(task, seed=s) for s in seeds]
    obs = np.stack([e.reset() for e in envs])
    returns = np.zeros(episodes)
    live = np.ones(episodes, dtype=bool)
    while live.any():
        idx = np.flatnonzero(live)
        actions = agent.act_batch(obs[idx], mode="mean")
        for j, i in enumerate(idx):
            tr = envs[i].step(actions[j])
            returns[i] += tr.r
            obs[i] = tr.s_next
            live[i] = not envs[i].done
    return float(returns.mean()), float(returns.std())


def delta_probe(model, pre_inputs: np.ndarray, post_inputs: np.ndarray) -> float:
    """Bias-proxy expectation on pre-update samples minus that on post-update samples.

    Continuous analogue of E_{d1}[bias] - E_{d2}[bias], with the ensemble
    disagreement of ``model`` standing in for its distance to the real dynamics.
    """
    return estimate_bias(model, pre_inputs) - estimate_bias(model, post_inputs)


def sample_visitation(mdp: TabularMDP, policy: np.ndarray, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Draw (s, a) pairs from the discounted visitation measure by geometric stopping."""
    S, A = mdp.R.shape
    stop = rng.geometric(1.0 - mdp.gamma, size=n) - 1  # P(t) = (1 - gamma) gamma^t
    s = rng.choice(S, size=n, p=mdp.rho0)
    cdf_pi = np.cumsum(policy, axis=1)
    cdf_P = np.cumsum(mdp.P, axis=2)
    a = np.empty(n, dtype=int)
    for t in range(int(stop.max()) + 1):
        a = np.minimum((rng.random(n)[:, None] > cdf_pi[s]).sum(axis=1), A - 1)
        moving = t < stop
        nxt = np.minimum((rng.random(n)[:, None] > cdf_P[s, a]).sum(axis=1), S - 1)
        s = np.where(moving, nxt, s)
    a = np.minimum((rng.random(n)[:, None] > cdf_pi[s]).sum(axis=1), A - 1)
    return s, a


def tabular_delta_probe(m1: TabularMDP, m2: TabularMDP, mstar: TabularMDP, pi1: np.ndarray, pi2: np.ndarray,
                        n_samples: int, seed=None) -> float:
    """Sample-based Δ on a finite MDP; converges to the exact value as n_samples grows."""
    rng = np.random.default_rng(seed)
    table = model_tvd_table(m2, mstar)
    s1, a1 = sample_visitation(m1, np.asarray(pi1), n_samples, rng)
    s2, a2 = sample_visitation(m2, np.asarray(pi2), n_samples, rng)
    return float(table[s1, a1].mean() - table[s2, a2].mean())


def _pred_error(model, batch: dict) -> float:
    X, y = transition_arrays(batch["s"], batch["a"], batch["r"], batch["s_next"])
    mean, _ = model.predict_dist(X)
    return float(np.mean((mean[np.asarray(model.elites_)].mean(axis=0) - y) ** 2))


# Epoch loop ---------------------------------------------------------------------------

def _collect(state: RunState, n: int) -> dict[str, np.ndarray]:
    cfg = state.config
    rng = state.rngs["explore"]
    action_dim = state.agent.action_dim
    rows = {k: [] for k in ("s", "a", "r", "s_next", "done")}
    for _ in range(n):
        if state.env_steps < cfg.init_random_steps:
            a = rng.uniform(-1.0, 1.0, size=action_dim)
        else:
            a = state.agent.act(state.obs, mode="sample", rng=rng)
        tr = state.env.step(a)
        state.env_buffer.add(tr.s, tr.a, tr.r, tr.s_next, tr.done)
        for k, v in zip(("s", "a", "r", "s_next", "done"), (tr.s, tr.a, tr.r, tr.s_next, tr.done)):
            rows[k].append(v)
        state.env_steps += 1
        state.obs = state.env.reset() if state.env.done else tr.s_next
    return {k: np.asarray(v) for k, v in rows.items()}


def _source_inputs(state: RunState) -> np.ndarray:
    """Model-buffer (s, a) pairs for phase 2, falling back to the env buffer when empty."""
    buf = state.model_buffer if len(state.model_buffer) else state.env_buffer
    pool = state.config.model.phase2_pool
    X = buf.inputs()
    if X.shape[0] > pool:
        X = X[state.rngs["phase2"].choice(X.shape[0], size=pool, replace=False)]
    return X


def run_epoch(state: RunState) -> EpochRecord:
    """One pass of the algorithm; appends the record and the event sequence to ``state``."""
    cfg = state.config
    events: list[str] = []
    t0 = time.perf_counter()
    model = state.model

    fresh = _collect(state, cfg.steps_per_epoch)
    events.append("collect")

    m1 = model.snapshot()
    events.append("snapshot")
    pre_inputs = _source_inputs(state)

    X, y = transition_arrays(*(state.env_buffer.contents()[k] for k in ("s", "a", "r", "s_next")))
    model.fit(X, y)
    events.append("phase1")

    ft = fine_tune(m1, model, pre_inputs, steps=cfg.model.phase2_steps, lr=cfg.model.phase2_lr,
                   variant=cfg.model.variant, batch_size=cfg.model.phase2_batch,
                   members=cfg.model.phase2_members, seed=state.rngs["phase2"].integers(2**63))
    state.phase2_steps += ft.steps
    events.append("phase2")

    term = termination_fn(cfg.task)
    horizon = cfg.rollout.horizon_at(state.epoch)
    starts = state.env_buffer.sample(cfg.rollout.batch_size, state.rngs["rollout"])["s"]
    rollout = branch_rollout(model, state.agent.rollout_policy, starts, horizon,
                             seed=state.rngs["rollout"].integers(2**63), termination_fn=term)
    state.model_buffer.add_batch(rollout)
    events.append("rollout")

    n_updates = cfg.policy.updates_per_step * cfg.steps_per_epoch
    info = {"critic_loss": math.nan, "actor_loss": math.nan, "alpha": state.agent.alpha}
    rng = state.rngs["updates"]
    for _ in range(n_updates):
        batch = mixed_batch(state.env_buffer, state.model_buffer, cfg.real_ratio, cfg.policy.batch_size, rng)
        info = state.agent.update(batch, rng)
    events.append("policy")

    probe_starts = state.env_buffer.sample(pre_inputs.shape[0], state.rngs["probe"])["s"]
    post = branch_rollout(model, state.agent.rollout_policy, probe_starts, horizon,
                          seed=state.rngs["probe"].integers(2**63), termination_fn=term)
    post_inputs = np.concatenate([post["s"], post["a"]], axis=1)
    probe = delta_probe(model, pre_inputs, post_inputs)

    ret_mean, ret_std = evaluate(state.agent, cfg.task, cfg.eval_episodes,
                                 seed=[state.eval_seed, state.epoch])
    events.append("evaluate")

    elite_nll = float(np.mean(model.holdout_nll_[model.elites_]))
    record = EpochRecord(
        epoch=state.epoch, env_steps=state.env_steps, model_train_steps=model.n_train_steps_ + state.phase2_steps,
        eval_return_mean=ret_mean, eval_return_std=ret_std,
        shift_before=ft.before.shift, bias_before=ft.before.bias,
        shift_after=ft.after.shift, bias_after=ft.after.bias, objective_delta=ft.objective_delta,
        holdout_nll=elite_nll, pred_error_before=_pred_error(m1, fresh), pred_error_after=_pred_error(model, fresh),
        delta_probe=probe, env_buffer_size=len(state.env_buffer), model_buffer_size=len(state.model_buffer),
        policy_updates=state.agent.n_updates, critic_loss=float(info["critic_loss"]),
        actor_loss=float(info["actor_loss"]), alpha=float(info["alpha"]),
        wall_clock=time.perf_counter() - t0,
    )
    state.records.append(record)
    state.events.append(events)
    state.epoch += 1
    return record


# Run directory ------------------------------------------------------------------------

def checkpoint_tensors(state: RunState) -> dict[str, np.ndarray]:
    tensors = state.agent.to_tensors("agent.")
    tensors.update(state.model.to_tensors("dynamics."))
    return tensors


class RunWriter:
    """Single sink for everything written into a run directory."""

    def __init__(self, out_dir, config: RunConfig, config_text: str):
        self.root = Path(out_dir)
        (self.root / "checkpoints").mkdir(parents=True, exist_ok=True)
        (self.root / "reports").mkdir(exist_ok=True)
        (self.root / "config.ini").write_text(config_text)
        self.config = config
        with open(self.root / "metrics.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(METRIC_COLUMNS)
        with open(self.root / "timing.csv", "w", newline="") as fh:
            csv.writer(fh).writerow(("epoch", "wall_clock_s"))
        (self.root / "reports" / "epochs.jsonl").write_text("")

    def write_epoch(self, record: EpochRecord, events: list[str]) -> None:
        with open(self.root / "metrics.csv", "a", newline="") as fh:
            csv.writer(fh).writerow(record.metric_row())
        with open(self.root / "timing.csv", "a", newline="") as fh:
            csv.writer(fh).writerow((record.epoch, f"{record.wall_clock:.3f}"))
        payload = {k: v for k, v in asdict(record).items() if k != "wall_clock"}
        payload["events"] = events
        with open(self.root / "reports" / "epochs.jsonl", "a") as fh:
            fh.write(json.dumps(payload) + "\n")

    def write_checkpoint(self, state: RunState, name: str) -> Path:
        path = self.root / "checkpoints" / name
        write_checkpoint(path, checkpoint_tensors(state))
        return path


def train(config: RunConfig, out_dir=None, config_text: str | None = None, progress=None) -> RunState:
    """Run every epoch of ``config``; with ``out_dir`` also materialize the run directory.

    A hard error writes ``checkpoints/abort_epoch_NNN.usbp`` before propagating.
    """
    state = init_run(config)
    writer = None
    if out_dir is not None:
        if config_text is None:
            from .config import dump_config
            config_text = dump_config(config)
        writer = RunWriter(out_dir, config, config_text)
    try:
        for _ in range(config.epochs):
            record = run_epoch(state)
            if writer is not None:
                writer.write_epoch(record, state.events[-1])
                last = state.epoch == config.epochs
                every = config.checkpoint_every
                if last or (every and state.epoch % every == 0):
                    writer.write_checkpoint(state, f"epoch_{record.epoch:03d}.usbp")
            if progress is not None:
                progress(record)
    except Exception:
        if writer is not None:
            writer.write_checkpoint(state, f"abort_epoch_{state.epoch:03d}.usbp")
        raise
    return state


def config_fields(section) -> tuple[str, ...]:
    return tuple(f.name for f in fields(section))
