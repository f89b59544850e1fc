"""Bootstrap ensemble of probabilistic dynamics models.

Phase 1 fits every member by Gaussian maximum likelihood on differently
shuffled copies of the environment data. Phase 2 (:func:`fine_tune`)
continues from the phase-1 result and descends the sum of two W2 terms:
the shift between a chosen member of the backed-up ensemble and a chosen
member of the current one, and the disagreement of that current member
with the rest of its ensemble, which stands in for the unknown distance to
the true dynamics.
"""
from __future__ import annotations

import copy
import hashlib
from dataclasses import dataclass
from typing import Callable, Literal

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import NonFiniteError, UsageError
from .gaussmetrics import w2_diag_batch, w2_diag_var
from .nncore import autograd as ag
from .nncore.mlp import DYNAMICS_LOG_STD, MLPSpec, forward_vars, gaussian_nll, gradient, init_params
from .nncore.optim import AdamState, adam_step
from .nncore.params import ParamVector

Variant = Literal["full", "shift_only", "bias_only", "none"]
VARIANTS = ("full", "shift_only", "bias_only", "none")


def transition_arrays(s, a, r, s_next) -> tuple[np.ndarray, np.ndarray]:
    """Model inputs (s ++ a) and targets (s' - s ++ r)."""
    s = np.atleast_2d(s)
    X = np.concatenate([s, np.atleast_2d(a)], axis=1)
    y = np.concatenate([np.atleast_2d(s_next) - s, np.reshape(r, (-1, 1))], axis=1)
    return X, y


class _Predictive:
    """Shared prediction code for live ensembles and frozen snapshots."""

    spec_: MLPSpec
    params_: ParamVector
    input_mean_: np.ndarray
    input_std_: np.ndarray
    elites_: np.ndarray

    def _normalize(self, X: np.ndarray) -> np.ndarray:
        return (X - self.input_mean_) / self.input_std_

    def predict_dist(self, X) -> tuple[np.ndarray, np.ndarray]:
        """Per-member predictive mean and std, each of shape (B, N, state_dim + 1)."""
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.spec_.input_dim:
            raise UsageError(f"expected {self.spec_.input_dim} input features, got {X.shape[1]}")
        mean, log_std = forward_vars(self.spec_, self.params_.tensors(), self._normalize(X))
        return mean.value, np.exp(log_std.value)

    @property
    def best_elite(self) -> int:
        return int(self.elites_[0])


@dataclass(frozen=True, eq=False)
class ModelSnapshot(_Predictive):
    """Immutable copy of an ensemble taken before phase 1 (the backed-up model)."""

    spec_: MLPSpec
    params_: ParamVector
    input_mean_: np.ndarray
    input_std_: np.ndarray
    elites_: np.ndarray

    def __post_init__(self):
        for arr in (self.params_.values, self.input_mean_, self.input_std_, self.elites_):
            arr.setflags(write=False)

    @property
    def n_members(self) -> int:
        return self.spec_.n_members

    def checksum(self) -> str:
        h = hashlib.sha256()
        for arr in (self.params_.values, self.input_mean_, self.input_std_, self.elites_):
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


class EnsembleDynamics(_Predictive, BaseEstimator):
    """Ensemble of MLPs with diagonal-Gaussian heads over (state delta, reward).

    Parameters
    ----------
    state_dim, action_dim : int
        Input is ``s ++ a``; output is ``(s' - s) ++ r``.
    n_members : int
        Ensemble size B.
    n_elites : int
        Members kept as elites after each fit, ranked by holdout NLL.
    hidden : tuple of int
        Hidden widths shared by all members.
    warm_start : bool
        Continue from the current parameters on repeated ``fit`` calls.
    """

    def __init__(self, state_dim: int = 1, action_dim: int = 1, n_members: int = 7, n_elites: int = 5,
                 hidden: tuple = (200, 200, 200, 200), activation: str = "swish", lr: float = 1e-3,
                 batch_size: int = 256, max_epochs: int = 50, patience: int = 5,
                 holdout_ratio: float = 0.2, max_holdout: int = 5000, min_samples: int = 2,
                 warm_start: bool = True, random_state=None):
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.n_members = n_members
        self.n_elites = n_elites
        self.hidden = hidden
        self.activation = activation
        self.lr = lr
        self.batch_size = batch_size
        self.max_epochs = max_epochs
        self.patience = patience
        self.holdout_ratio = holdout_ratio
        self.max_holdout = max_holdout
        self.min_samples = min_samples
        self.warm_start = warm_start
        self.random_state = random_state

    # setup ------------------------------------------------------------------------
    def _validate_params(self) -> None:
        if self.n_members < 1 or not 1 <= self.n_elites <= self.n_members:
            raise UsageError("need 1 <= n_elites <= n_members")
        if self.lr <= 0:
            raise UsageError("lr must be positive")

    def _rng(self) -> np.random.Generator:
        if not hasattr(self, "_rng_state"):
            self._rng_state = np.random.default_rng(self.random_state)
        return self._rng_state

    def initialize(self) -> "EnsembleDynamics":
        """Allocate parameters without training (the untrained model of the first epoch)."""
        self._validate_params()
        self.spec_ = MLPSpec(self.state_dim + self.action_dim, tuple(self.hidden), self.state_dim + 1,
                             self.activation, True, DYNAMICS_LOG_STD, self.n_members)
        self.params_ = init_params(self.spec_, self._rng())
        self.input_mean_ = np.zeros(self.spec_.input_dim)
        self.input_std_ = np.ones(self.spec_.input_dim)
        self.elites_ = np.arange(self.n_elites)
        self.holdout_nll_ = np.full(self.n_members, np.inf)
        self.n_train_steps_ = 0
        self._adam = AdamState.zeros_like(self.params_)
        return self

    def __sklearn_is_fitted__(self) -> bool:
        return hasattr(self, "params_")

    # phase 1 ---------------------------------------------------------------------------
    def _member_nll(self, params: ParamVector, Xn: np.ndarray, y: np.ndarray) -> np.ndarray:
        mean, log_std = forward_vars(self.spec_, params.tensors(), Xn)
        z = (y - mean.value) * np.exp(-log_std.value)
        per = 0.5 * z ** 2 + log_std.value + 0.5 * np.log(2.0 * np.pi)
        return per.sum(-1).mean(-1)

    def fit(self, X, y) -> "EnsembleDynamics":
        """Maximum-likelihood training with a holdout split and per-member early stopping."""
        X, y = check_array(X, dtype=np.float64), check_array(y, dtype=np.float64)
        if X.shape[0] != y.shape[0]:
            raise UsageError("X and y have different numbers of rows")
        if X.shape[0] < self.min_samples:
            raise UsageError(f"need at least {self.min_samples} transitions to fit, got {X.shape[0]}")
        if not self.warm_start or not self.__sklearn_is_fitted__():
            self.initialize()
        if X.shape[1] != self.spec_.input_dim or y.shape[1] != self.spec_.output_dim:
            raise UsageError("X/y widths do not match state_dim/action_dim")
        rng = self._rng()
        B = self.n_members
        self.input_mean_ = X.mean(axis=0)
        self.input_std_ = np.where(X.std(axis=0) > 1e-12, X.std(axis=0), 1.0)
        Xn = self._normalize(X)

        n = X.shape[0]
        order = rng.permutation(n)
        n_hold = min(int(n * self.holdout_ratio), self.max_holdout)
        hold, train = order[:n_hold], order[n_hold:]
        if n_hold == 0:
            hold = train
        Xh, yh = Xn[hold], y[hold]
        best_nll = self._member_nll(self.params_, Xh, yh)
        best_vals = self.params_.values.copy()
        member_slices = self._member_slices()
        stale = 0
        n_train = train.size
        bs = min(self.batch_size, n_train)
        for _ in range(self.max_epochs):
            perms = np.stack([rng.permutation(train) for _ in range(B)])
            for start in range(0, n_train, bs):
                idx = perms[:, start:start + bs]
                xb, yb = Xn[idx], y[idx]

                def loss_fn(t):
                    mean, log_std = forward_vars(self.spec_, t, xb)
                    return gaussian_nll(mean, log_std, yb) * B

                _, grad = gradient(loss_fn, self.params_)
                self.params_ = adam_step(self.params_, grad, self._adam, self.lr)
                self.n_train_steps_ += 1
            nll = self._member_nll(self.params_, Xh, yh)
            if not np.all(np.isfinite(nll)):
                raise NonFiniteError(f"holdout NLL became non-finite: {nll}")
            improved = (best_nll - nll) / np.maximum(np.abs(best_nll), 1e-12) > 0.01
            for b in np.flatnonzero(nll < best_nll):
                best_vals[member_slices[b]] = self.params_.values[member_slices[b]]
                best_nll[b] = nll[b]
            stale = 0 if improved.any() else stale + 1
            if stale >= self.patience:
                break
        self.params_ = self.params_.with_values(best_vals)
        self.holdout_nll_ = best_nll
        self.elites_ = np.argsort(best_nll, kind="stable")[: self.n_elites]
        return self

    def _member_slices(self) -> list[np.ndarray]:
        """Flat indices of each member's parameters."""
        idx = np.arange(len(self.params_))
        view = ParamVector(idx.astype(np.float64), self.params_.layout).tensors()
        return [np.concatenate([t[b].reshape(-1) for t in view.values()]).astype(int)
                for b in range(self.n_members)]

    def member_mask(self, members) -> np.ndarray:
        """0/1 vector over the flat parameters selecting the given members."""
        mask = np.zeros(len(self.params_))
        for b, sl in enumerate(self._member_slices()):
            if b in set(int(m) for m in members):
                mask[sl] = 1.0
        return mask

    def predict(self, X) -> np.ndarray:
        """Elite-averaged mean prediction of (state delta, reward)."""
        check_is_fitted(self)
        mean, _ = self.predict_dist(X)
        return mean[self.elites_].mean(axis=0)

    def score(self, X, y) -> float:
        """Negative mean Gaussian NLL over elites (higher is better)."""
        check_is_fitted(self)
        X, y = check_array(X, dtype=np.float64), check_array(y, dtype=np.float64)
        nll = self._member_nll(self.params_, self._normalize(X), y)
        return -float(nll[self.elites_].mean())

    def snapshot(self) -> ModelSnapshot:
        check_is_fitted(self)
        return ModelSnapshot(self.spec_, self.params_.copy(), self.input_mean_.copy(),
                             self.input_std_.copy(), np.array(self.elites_, copy=True))

    def restore(self, snap: ModelSnapshot) -> "EnsembleDynamics":
        self.spec_ = snap.spec_
        self.params_ = snap.params_.copy()
        self.input_mean_ = np.array(snap.input_mean_)
        self.input_std_ = np.array(snap.input_std_)
        self.elites_ = np.array(snap.elites_)
        return self

    def to_tensors(self, prefix: str = "dynamics.") -> dict[str, np.ndarray]:
        check_is_fitted(self)
        out = {prefix + k: v for k, v in self.params_.tensors().items()}
        out[prefix + "input_mean"] = self.input_mean_
        out[prefix + "input_std"] = self.input_std_
        out[prefix + "elites"] = self.elites_.astype(np.float64)
        return out


# Shift / bias estimators --------------------------------------------------------

@dataclass(frozen=True)
class ShiftBiasEstimate:
    shift: float
    bias: float

    def __post_init__(self):
        for name in ("shift", "bias"):
            v = getattr(self, name)
            if not np.isfinite(v) or v < 0:
                raise NonFiniteError(f"{name} estimate must be finite and nonnegative, got {v}")

    @property
    def objective(self) -> float:
        return self.shift + self.bias


def _check_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise UsageError("batch of (s, a) pairs must be a non-empty 2-D array")
    return X


def estimate_shift(m1: _Predictive, m2: _Predictive, batch, k1: int | None = None, k2: int | None = None) -> float:
    """Batch mean of W2(member k1 of M1, member k2 of M2)."""
    batch = _check_batch(batch)
    k1 = m1.best_elite if k1 is None else k1
    k2 = m2.best_elite if k2 is None else k2
    mu1, sd1 = m1.predict_dist(batch)
    mu2, sd2 = m2.predict_dist(batch)
    return float(np.mean(w2_diag_batch(mu1[k1], sd1[k1], mu2[k2], sd2[k2])))


def estimate_bias(m2: _Predictive, batch, k2: int | None = None) -> float:
    """Batch mean of (1 / (B - 1)) * sum over b != k2 of W2(member k2, member b)."""
    batch = _check_batch(batch)
    mu, sd = m2.predict_dist(batch)
    B = mu.shape[0]
    if B < 2:
        raise UsageError("the ensemble-disagreement bias proxy needs at least two members")
    k2 = m2.best_elite if k2 is None else k2
    dists = w2_diag_batch(mu[k2][None], sd[k2][None], mu, sd)  # (B, N)
    return float(np.mean(np.delete(dists, k2, axis=0).sum(axis=0) / (B - 1)))


def estimate_shift_bias(m1: _Predictive, m2: _Predictive, batch, k1=None, k2=None) -> ShiftBiasEstimate:
    return ShiftBiasEstimate(estimate_shift(m1, m2, batch, k1, k2), estimate_bias(m2, batch, k2))


def phase2_objective_var(spec: MLPSpec, tensors, Xn: np.ndarray, m1_mean: np.ndarray, m1_std: np.ndarray,
                         k2: int, use_shift: bool = True, use_bias: bool = True) -> tuple[ag.Var, ag.Var, ag.Var]:
    """Differentiable (objective, shift, bias) as a function of the current ensemble's parameters.

    ``Xn`` is the normalized batch; ``m1_mean``/``m1_std`` are the frozen
    predictions of the backed-up member k1 on that batch.
    """
    mean, log_std = forward_vars(spec, tensors, Xn)
    std = ag.exp(log_std)
    B = spec.n_members
    mu_k, sd_k = mean[k2], std[k2]
    shift = w2_diag_var(m1_mean, m1_std, mu_k, sd_k).mean()
    if B > 1:
        pair = w2_diag_var(mu_k, sd_k, mean, std)  # (B, N); the k2 row is exactly 0
        bias = (pair.sum(axis=0) * (1.0 / (B - 1))).mean()
    else:
        bias = ag.Var(0.0)
    obj = ag.Var(0.0)
    if use_shift:
        obj = obj + shift
    if use_bias:
        obj = obj + bias
    return obj, shift, bias


def phase2_gradient(m1: _Predictive, m2: "EnsembleDynamics", batch, params: ParamVector | None = None,
                    variant: Variant = "full", k1=None, k2=None) -> tuple[float, ParamVector]:
    """Objective value and its gradient w.r.t. the current ensemble parameters."""
    batch = _check_batch(batch)
    k1 = m1.best_elite if k1 is None else k1
    k2 = m2.best_elite if k2 is None else k2
    mu1, sd1 = m1.predict_dist(batch)
    Xn = m2._normalize(batch)
    use_shift, use_bias = variant in ("full", "shift_only"), variant in ("full", "bias_only")

    def loss_fn(t):
        return phase2_objective_var(m2.spec_, t, Xn, mu1[k1], sd1[k1], k2, use_shift, use_bias)[0]

    return gradient(loss_fn, m2.params_ if params is None else params)


@dataclass
class FineTuneResult:
    before: ShiftBiasEstimate
    after: ShiftBiasEstimate
    steps: int
    grad_norm: float

    @property
    def objective_delta(self) -> float:
        return self.before.objective - self.after.objective


def fine_tune(m1: ModelSnapshot, m2: EnsembleDynamics, batch_source, steps: int = 40, lr: float = 1e-4,
              variant: Variant = "full", batch_size: int = 256, members: Literal["all", "elites"] = "all",
              seed=None) -> FineTuneResult:
    """Phase 2: Adam descent on the shift + bias objective, in place on ``m2``.

    ``batch_source`` is an array of (s, a) model inputs; each step draws a
    uniform minibatch of ``batch_size`` rows from it (the whole array when it
    is smaller). ``before``/``after`` are evaluated on the whole array with the
    full two-term estimate regardless of ``variant``. On a non-finite
    objective ``m2`` is restored and :class:`NonFiniteError` propagates.
    """
    if variant not in VARIANTS:
        raise UsageError(f"unknown variant {variant!r}")
    if lr <= 0 or steps < 0:
        raise UsageError("need lr > 0 and steps >= 0")
    check_is_fitted(m2)
    source = _check_batch(batch_source)
    k1, k2 = m1.best_elite, m2.best_elite
    before = estimate_shift_bias(m1, m2, source, k1, k2)
    if steps == 0 or variant == "none":
        return FineTuneResult(before, before, 0, 0.0)
    rng = np.random.default_rng(seed)
    saved = m2.params_.copy()
    mask = m2.member_mask(m2.elites_) if members == "elites" else None
    state = AdamState.zeros_like(m2.params_)
    grad_norm = 0.0
    try:
        for step in range(steps):
            if source.shape[0] <= batch_size:
                batch = source
            else:
                batch = source[rng.integers(0, source.shape[0], size=batch_size)]
            _, grad = phase2_gradient(m1, m2, batch, variant=variant, k1=k1, k2=k2)
            if mask is not None:
                grad = grad.with_values(grad.values * mask)
            if step == 0:
                grad_norm = float(np.linalg.norm(grad.values))
            m2.params_ = adam_step(m2.params_, grad, state, lr)
        after = estimate_shift_bias(m1, m2, source, k1, k2)
    except (NonFiniteError, FloatingPointError):
        m2.params_ = saved
        raise
    return FineTuneResult(before, after, steps, grad_norm)


# Rollouts ------------------------------------------------------------------------

def branch_rollout(model: _Predictive, policy: Callable[[np.ndarray, np.random.Generator], np.ndarray],
                   start_states: np.ndarray, horizon: int, seed=None,
                   termination_fn: Callable[[np.ndarray], np.ndarray] | None = None,
                   deterministic: bool = False) -> dict[str, np.ndarray]:
    """Short model rollouts branched from real states.

    At every step each trajectory draws one elite uniformly and samples
    (delta s, r) from that member's Gaussian. Trajectories stop once the
    termination predicate fires on the predicted next state.
    """
    if horizon < 1:
        raise UsageError("horizon must be >= 1")
    rng = np.random.default_rng(seed)
    s = np.array(start_states, dtype=np.float64, copy=True)
    state_dim = s.shape[1]
    elites = np.asarray(model.elites_)
    out = {k: [] for k in ("s", "a", "r", "s_next", "done")}
    for _ in range(horizon):
        if s.shape[0] == 0:
            break
        a = policy(s, rng)
        X = np.concatenate([s, a], axis=1)
        mu, sd = model.predict_dist(X)
        pick = elites[rng.integers(0, elites.size, size=s.shape[0])] if elites.size > 1 else np.full(s.shape[0], elites[0])
        rows = np.arange(s.shape[0])
        mean, std = mu[pick, rows], sd[pick, rows]
        sample = mean if deterministic else mean + std * rng.standard_normal(mean.shape)
        s_next = s + sample[:, :state_dim]
        r = sample[:, state_dim]
        done = termination_fn(s_next) if termination_fn is not None else np.zeros(s.shape[0], dtype=bool)
        done = np.asarray(done, dtype=bool)
        for key, val in (("s", s), ("a", a), ("r", r), ("s_next", s_next), ("done", done)):
            out[key].append(val)
        s = s_next[~done]
    if not out["s"]:
        return {"s": np.zeros((0, state_dim)), "a": np.zeros((0, 0)), "r": np.zeros(0),
                "s_next": np.zeros((0, state_dim)), "done": np.zeros(0, dtype=bool)}
    return {k: np.concatenate(v, axis=0) for k, v in out.items()}


def clone_model(model: EnsembleDynamics) -> EnsembleDynamics:
    return copy.deepcopy(model)
