"""Soft actor-critic over mixed real/model replay data."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import NonFiniteError, UsageError
from .nncore import autograd as ag
from .nncore.mlp import (POLICY_LOG_STD, MLPSpec, backward_cached, forward_cached, forward_vars, gradient,
                         init_params, param_gradient)
from .nncore.optim import AdamState, adam_step
from .nncore.params import ParamVector

_HALF_LOG_2PI = 0.5 * np.log(2.0 * np.pi)
_LOG2 = np.log(2.0)
FIELDS = ("s", "a", "r", "s_next", "done")


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise UsageError("capacity must be >= 1")
        self.capacity = capacity
        self.s = np.zeros((capacity, state_dim))
        self.a = np.zeros((capacity, action_dim))
        self.r = np.zeros(capacity)
        self.s_next = np.zeros((capacity, state_dim))
        self.done = np.zeros(capacity, dtype=bool)
        self.cursor = 0
        self.size = 0
        self.total_added = 0

    def __len__(self) -> int:
        return self.size

    def add(self, s, a, r, s_next, done) -> None:
        i = self.cursor
        self.s[i], self.a[i], self.r[i], self.s_next[i], self.done[i] = s, a, r, s_next, done
        self.cursor = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)
        self.total_added += 1

    def add_batch(self, batch: dict[str, np.ndarray]) -> None:
        n = len(batch["r"])
        if n == 0:
            return
        if n > self.capacity:
            batch = {k: v[-self.capacity:] for k, v in batch.items()}
            self.total_added += n - self.capacity
            n = self.capacity
        idx = (self.cursor + np.arange(n)) % self.capacity
        for k in FIELDS:
            getattr(self, k)[idx] = batch[k]
        self.cursor = int((self.cursor + n) % self.capacity)
        self.size = min(self.size + n, self.capacity)
        self.total_added += n

    def sample(self, n: int, rng: np.random.Generator) -> dict[str, np.ndarray]:
        if self.size == 0:
            raise UsageError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=n)
        return {k: getattr(self, k)[idx] for k in FIELDS}

    def contents(self) -> dict[str, np.ndarray]:
        return {k: getattr(self, k)[: self.size].copy() for k in FIELDS}

    def inputs(self) -> np.ndarray:
        """Stored (s, a) pairs as model inputs."""
        return np.concatenate([self.s[: self.size], self.a[: self.size]], axis=1)


def mixed_batch(env_buf: ReplayBuffer, model_buf: ReplayBuffer, real_ratio: float, n: int,
                rng: np.random.Generator) -> dict[str, np.ndarray]:
    """ceil(real_ratio * n) transitions from the environment buffer, the rest from the model buffer."""
    if not 0.0 <= real_ratio <= 1.0:
        raise UsageError("real_ratio must lie in [0, 1]")
    n_real = int(np.ceil(real_ratio * n - 1e-12))
    n_model = n - n_real
    if n_real and not len(env_buf):
        raise UsageError("requested real transitions from an empty environment buffer")
    if n_model and not len(model_buf):
        raise UsageError("requested model transitions from an empty model buffer")
    parts = []
    if n_real:
        parts.append(env_buf.sample(n_real, rng))
    if n_model:
        parts.append(model_buf.sample(n_model, rng))
    return {k: np.concatenate([p[k] for p in parts], axis=0) for k in FIELDS}


def squashed_gaussian_logprob(u: ag.Var, mean: ag.Var, log_std: ag.Var) -> ag.Var:
    """log-density of tanh(u) for u ~ N(mean, std), summed over the last axis."""
    z = (u - mean) * ag.exp(-log_std)
    base = -0.5 * ag.square(z) - log_std - _HALF_LOG_2PI
    return (base - ag.log1m_tanh_sq(u)).sum(axis=-1)


@dataclass
class SacConfig:
    hidden: tuple[int, ...] = (64, 64)
    gamma: float = 0.99
    tau: float = 0.005
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    alpha_lr: float = 3e-4
    init_log_alpha: float = 0.0
    target_entropy: float | None = None
    batch_size: int = 256

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if not 0.0 < self.tau <= 1.0:
            raise UsageError("tau must lie in (0, 1]")
        if not 0.0 <= self.gamma < 1.0:
            raise UsageError("gamma must lie in [0, 1)")


@dataclass
class SacAgent:
    state_dim: int
    action_dim: int
    config: SacConfig = field(default_factory=SacConfig)
    seed: int | None = None

    def __post_init__(self):
        cfg = self.config
        rng = np.random.default_rng(self.seed)
        self.rng = rng
        self.actor_spec = MLPSpec(self.state_dim, cfg.hidden, self.action_dim, "relu", True, POLICY_LOG_STD)
        self.critic_spec = MLPSpec(self.state_dim + self.action_dim, cfg.hidden, 1, "relu",
                                   gaussian_head=False, n_members=2)
        self.actor = init_params(self.actor_spec, rng)
        self.critic = init_params(self.critic_spec, rng)
        self.target_critic = self.critic.copy()
        self.log_alpha = float(cfg.init_log_alpha)
        self.target_entropy = -float(self.action_dim) if cfg.target_entropy is None else cfg.target_entropy
        self._actor_opt = AdamState.zeros_like(self.actor)
        self._critic_opt = AdamState.zeros_like(self.critic)
        self._alpha_opt = AdamState(np.zeros(1), np.zeros(1))
        self.n_updates = 0

    @property
    def alpha(self) -> float:
        return float(np.exp(self.log_alpha))

    # acting --------------------------------------------------------------------------
    def _actor_dist(self, tensors, s):
        return forward_vars(self.actor_spec, tensors, s)

    def act_batch(self, states: np.ndarray, mode: str = "sample", rng: np.random.Generator | None = None) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if states.shape[1] != self.state_dim:
            raise UsageError(f"expected state dim {self.state_dim}, got {states.shape[1]}")
        (mean, log_std), _ = forward_cached(self.actor_spec, self.actor.tensors(), states)
        if mode == "mean":
            return np.tanh(mean)
        if mode != "sample":
            raise UsageError("mode must be 'sample' or 'mean'")
        rng = self.rng if rng is None else rng
        return np.tanh(mean + np.exp(log_std) * rng.standard_normal(mean.shape))

    def act(self, state, mode: str = "sample", rng: np.random.Generator | None = None) -> np.ndarray:
        return self.act_batch(np.asarray(state)[None], mode, rng)[0]

    def rollout_policy(self, s: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.act_batch(s, "sample", rng)

    # learning ------------------------------------------------------------------------
    def _sample_with_logprob(self, actor_tensors, s, eps):
        mean, log_std = self._actor_dist(actor_tensors, s)
        u = mean + ag.exp(log_std) * eps
        return ag.tanh(u), squashed_gaussian_logprob(u, mean, log_std)

    def _sample_fast(self, s, eps):
        (mean, log_std), cache = forward_cached(self.actor_spec, self.actor.tensors(), s)
        std = np.exp(log_std)
        u = mean + std * eps
        log1m = 2.0 * (_LOG2 - u - np.logaddexp(0.0, -2.0 * u))
        logp = np.sum(-0.5 * eps ** 2 - log_std - _HALF_LOG_2PI - log1m, axis=-1)
        return np.tanh(u), logp, (u, std, cache)

    def critic_target(self, batch: dict, eps_next: np.ndarray) -> np.ndarray:
        """r + gamma (1 - done) (min_i Q_targ_i(s', a') - alpha log pi(a'|s'))."""
        a_next, logp_next, _ = self._sample_fast(batch["s_next"], eps_next)
        q_in = np.concatenate([batch["s_next"], a_next], axis=1)
        q_targ, _ = forward_cached(self.critic_spec, self.target_critic.tensors(), q_in)
        soft_v = q_targ[..., 0].min(axis=0) - self.alpha * logp_next
        return batch["r"] + self.config.gamma * (1.0 - batch["done"]) * soft_v

    def critic_gradient(self, batch: dict, y: np.ndarray) -> tuple[float, ParamVector]:
        """Loss 0.5 * sum over critics of mean (Q_i(s, a) - y)^2 and its gradient."""
        q_in = np.concatenate([batch["s"], batch["a"]], axis=1)
        tensors = self.critic.tensors()
        q, cache = forward_cached(self.critic_spec, tensors, q_in)
        err = q[..., 0] - y
        n = err.shape[1]
        grads, _ = backward_cached(self.critic_spec, tensors, cache, (err / n)[..., None])
        return float(0.5 * np.mean(err ** 2, axis=1).sum()), param_gradient(self.critic_spec, self.critic, grads)

    def critic_gradient_reference(self, batch: dict, y: np.ndarray) -> tuple[float, ParamVector]:
        q_in = np.concatenate([batch["s"], batch["a"]], axis=1)

        def loss(t):
            q = forward_vars(self.critic_spec, t, q_in)[..., 0]  # (2, N)
            return 0.5 * ag.square(q - y).mean(axis=1).sum()

        return gradient(loss, self.critic)

    def actor_gradient(self, batch: dict, eps: np.ndarray) -> tuple[float, ParamVector, np.ndarray]:
        """Loss mean(alpha log pi(a|s) - min_i Q_i(s, a)), a reparameterized by ``eps``."""
        s = batch["s"]
        n = s.shape[0]
        alpha = self.alpha
        a, logp, (u, std, a_cache) = self._sample_fast(s, eps)
        c_tensors = self.critic.tensors()
        q, c_cache = forward_cached(self.critic_spec, c_tensors, np.concatenate([s, a], axis=1))
        q = q[..., 0]
        pick = np.argmin(q, axis=0)  # ties go to the first critic
        d_q = np.zeros_like(q)
        d_q[pick, np.arange(n)] = -1.0 / n
        _, d_in = backward_cached(self.critic_spec, c_tensors, c_cache, d_q[..., None])
        d_a = d_in[:, self.state_dim:]
        # log(1 - tanh(u)^2) has derivative -2 tanh(u)
        d_u = d_a * (1.0 - a ** 2) + (alpha / n) * 2.0 * a
        d_log_std = -alpha / n + d_u * std * eps
        grads, _ = backward_cached(self.actor_spec, self.actor.tensors(), a_cache, (d_u, d_log_std))
        loss = float(np.mean(alpha * logp - q[pick, np.arange(n)]))
        return loss, param_gradient(self.actor_spec, self.actor, grads), logp

    def actor_gradient_reference(self, batch: dict, eps: np.ndarray) -> tuple[float, ParamVector]:
        critic_tensors = self.critic.tensors()
        alpha = self.alpha

        def loss(t):
            a, logp = self._sample_with_logprob(t, batch["s"], eps)
            q = forward_vars(self.critic_spec, critic_tensors, ag.concat([ag.constant(batch["s"]), a], axis=-1))
            q_min = ag.minimum(q[0, :, 0], q[1, :, 0])
            return (alpha * logp - q_min).mean()

        return gradient(loss, self.actor)

    def update(self, batch: dict, rng: np.random.Generator | None = None) -> dict[str, float]:
        """One SAC step on critics, actor and temperature, then Polyak-average the targets."""
        rng = self.rng if rng is None else rng
        n = len(batch["r"])
        if n < 1:
            raise UsageError("empty batch")
        eps_next = rng.standard_normal((n, self.action_dim))
        eps = rng.standard_normal((n, self.action_dim))
        y = self.critic_target(batch, eps_next)

        c_loss, c_grad = self.critic_gradient(batch, y)
        self.critic = adam_step(self.critic, c_grad, self._critic_opt, self.config.critic_lr)

        a_loss, a_grad, logp = self.actor_gradient(batch, eps)
        self.actor = adam_step(self.actor, a_grad, self._actor_opt, self.config.actor_lr)

        # d/dlog_alpha of -log_alpha * mean(logp + target_entropy)
        g_alpha = -float(np.mean(logp + self.target_entropy))
        alpha_params = ParamVector(np.array([self.log_alpha]), (("log_alpha", (1,)),))
        alpha_params = adam_step(alpha_params, alpha_params.with_values(np.array([g_alpha])),
                                 self._alpha_opt, self.config.alpha_lr)
        self.log_alpha = float(alpha_params.values[0])

        tau = self.config.tau
        self.target_critic = self.target_critic.with_values(
            (1.0 - tau) * self.target_critic.values + tau * self.critic.values)
        self.n_updates += 1
        if not (np.isfinite(c_loss) and np.isfinite(a_loss) and np.isfinite(self.log_alpha)):
            raise NonFiniteError("SAC update produced a non-finite value")
        assert self.alpha > 0.0
        return {"critic_loss": c_loss, "actor_loss": a_loss, "alpha": self.alpha,
                "entropy": -float(np.mean(logp))}

    # serialization -------------------------------------------------------------------
    def to_tensors(self, prefix: str = "agent.") -> dict[str, np.ndarray]:
        out = {f"{prefix}actor.{k}": v for k, v in self.actor.tensors().items()}
        out.update({f"{prefix}critic.{k}": v for k, v in self.critic.tensors().items()})
        out.update({f"{prefix}target_critic.{k}": v for k, v in self.target_critic.tensors().items()})
        out[f"{prefix}log_alpha"] = np.array([self.log_alpha])
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray], prefix: str = "agent.", config: SacConfig | None = None) -> "SacAgent":
        """Rebuild an agent, inferring layer sizes from the actor weight shapes."""
        names = sorted((k for k in tensors if k.startswith(prefix + "actor.") and k.endswith(".W")),
                       key=lambda k: int(k[len(prefix + "actor.l"):].split(".")[0]))
        if not names:
            raise UsageError("checkpoint holds no actor weights")
        shapes = [tensors[k].shape for k in names]
        state_dim, action_dim = shapes[0][0], shapes[-1][1] // 2
        hidden = tuple(s[1] for s in shapes[:-1])
        cfg = config or SacConfig(hidden=hidden)
        cfg.hidden = hidden
        agent = cls(state_dim, action_dim, cfg, seed=0)
        for attr in ("actor", "critic", "target_critic"):
            current: ParamVector = getattr(agent, attr)
            sub = {n: tensors[f"{prefix}{attr}.{n}"] for n, _ in current.layout if f"{prefix}{attr}.{n}" in tensors}
            if len(sub) == len(current.layout):
                setattr(agent, attr, ParamVector.from_tensors(sub))
        if f"{prefix}log_alpha" in tensors:
            agent.log_alpha = float(tensors[f"{prefix}log_alpha"][0])
        return agent


def policy_tvd_estimate(agent_a: SacAgent, agent_b: SacAgent, states: np.ndarray, n_samples: int = 2000,
                        seed=None) -> float:
    """Monte-Carlo max over states of TV between two squashed-Gaussian policies.

    Diagnostic only: TV(p, q) = E_p[max(0, 1 - q/p)], estimated from samples
    of the pre-squash Gaussians (tanh is a bijection, so the Jacobians cancel).
    """
    rng = np.random.default_rng(seed)
    best = 0.0
    for s in np.atleast_2d(states):
        ma, la = (v.value[0] for v in agent_a._actor_dist(agent_a.actor.tensors(), s[None]))
        mb, lb = (v.value[0] for v in agent_b._actor_dist(agent_b.actor.tensors(), s[None]))
        u = ma + np.exp(la) * rng.standard_normal((n_samples, ma.size))

        def logpdf(x, m, ls):
            return np.sum(-0.5 * ((x - m) / np.exp(ls)) ** 2 - ls - _HALF_LOG_2PI, axis=-1)

        ratio = np.exp(logpdf(u, mb, lb) - logpdf(u, ma, la))
        best = max(best, float(np.mean(np.maximum(0.0, 1.0 - ratio))))
    return best
