"""Dense networks with optional diagonal-Gaussian output heads.

Parameters live in a :class:`ParamVector`. Ensembles store each weight with
a leading member axis, ``W: (B, fan_in, fan_out)``, so one batched matmul
evaluates every member.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, NamedTuple

import numpy as np

from ..exceptions import UsageError
from . import autograd as ag
from .autograd import Var
from .params import ParamVector

_LOG_2PI = np.log(2.0 * np.pi)

DYNAMICS_LOG_STD = (-10.0, 0.5)
POLICY_LOG_STD = (-20.0, 2.0)


@dataclass(frozen=True)
class MLPSpec:
    input_dim: int
    hidden: tuple[int, ...]
    output_dim: int
    activation: str = "swish"
    gaussian_head: bool = True
    log_std_bounds: tuple[float, float] = DYNAMICS_LOG_STD
    n_members: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.input_dim < 1 or self.output_dim < 1 or not self.hidden or min(self.hidden) < 1:
            raise UsageError(f"invalid MLP dimensions in {self}")
        if self.activation not in ag.ACTIVATIONS:
            raise UsageError(f"unknown activation {self.activation!r}")
        if self.n_members is not None and self.n_members < 1:
            raise UsageError("n_members must be >= 1")
        lo, hi = self.log_std_bounds
        if not lo < hi:
            raise UsageError("log_std_bounds must satisfy lo < hi")

    @property
    def layer_dims(self) -> list[tuple[int, int]]:
        dims = [self.input_dim, *self.hidden, self.output_dim * (2 if self.gaussian_head else 1)]
        return list(zip(dims[:-1], dims[1:]))


class GaussianHeadOutput(NamedTuple):
    mean: np.ndarray
    log_std: np.ndarray


def _truncated_normal(rng: np.random.Generator, shape, scale: float) -> np.ndarray:
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * scale


def init_params(spec: MLPSpec, rng: np.random.Generator) -> ParamVector:
    """Truncated-normal weights with scale 1/sqrt(fan_in), zero biases."""
    lead = () if spec.n_members is None else (spec.n_members,)
    tensors = {}
    for i, (fan_in, fan_out) in enumerate(spec.layer_dims):
        tensors[f"l{i}.W"] = _truncated_normal(rng, lead + (fan_in, fan_out), 1.0 / np.sqrt(fan_in))
        tensors[f"l{i}.b"] = np.zeros(lead + (1, fan_out) if lead else (fan_out,))
    return ParamVector.from_tensors(tensors)


def forward_vars(spec: MLPSpec, tensors: Mapping[str, Var | np.ndarray], x) -> Var | tuple[Var, Var]:
    """Graph-building forward pass.

    Returns ``(mean, log_std)`` Vars for a Gaussian head, otherwise a single Var.
    """
    act = ag.ACTIVATIONS[spec.activation]
    h = ag.as_var(x)
    if h.shape[-1] != spec.input_dim:
        raise UsageError(f"expected input dim {spec.input_dim}, got {h.shape[-1]}")
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        h = ag.matmul(h, ag.as_var(tensors[f"l{i}.W"])) + ag.as_var(tensors[f"l{i}.b"])
        if i < n_layers - 1:
            h = act(h)
    if not spec.gaussian_head:
        return h
    d = spec.output_dim
    mean = h[..., :d]
    log_std = ag.soft_clamp(h[..., d:], *spec.log_std_bounds)
    return mean, log_std


def forward(spec: MLPSpec, params: ParamVector, x: np.ndarray):
    """Evaluate the network on ``x`` without recording gradients."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 0 or x.shape[-1] != spec.input_dim:
        raise UsageError(f"expected input dim {spec.input_dim}, got shape {x.shape}")
    out = forward_vars(spec, params.tensors(), x)
    if spec.gaussian_head:
        return GaussianHeadOutput(out[0].value, out[1].value)
    return out.value


def gaussian_nll(mean: Var, log_std: Var, target) -> Var:
    """Mean over samples of the diagonal-Gaussian negative log-likelihood.

    Sums over the last axis, averages over all leading axes.
    """
    z = (ag.as_var(target) - mean) * ag.exp(-log_std)
    per_dim = 0.5 * ag.square(z) + log_std + 0.5 * _LOG_2PI
    per_sample = per_dim.sum(axis=-1)
    return per_sample.mean()


def gradient(loss_fn: Callable[[dict[str, Var]], Var], params: ParamVector) -> tuple[float, ParamVector]:
    """Return ``(loss, dloss/dparams)`` where ``loss_fn`` maps named parameter Vars to a scalar Var."""
    names = [n for n, _ in params.layout]
    views = params.tensors()
    value, grads = ag.grad_of(lambda *vs: loss_fn(dict(zip(names, vs))), [views[n] for n in names])
    return value, ParamVector.from_tensors(dict(zip(names, grads)))


def member_params(spec: MLPSpec, params: ParamVector, k: int) -> tuple[MLPSpec, ParamVector]:
    """Slice member ``k`` out of an ensemble ParamVector as a standalone network."""
    if spec.n_members is None:
        raise UsageError("not an ensemble spec")
    tensors = {n: t[k] if n.endswith(".W") else t[k, 0] for n, t in params.tensors().items()}
    single = MLPSpec(spec.input_dim, spec.hidden, spec.output_dim, spec.activation,
                     spec.gaussian_head, spec.log_std_bounds, None)
    return single, ParamVector.from_tensors(tensors)


# Hand-derived backward pass -------------------------------------------------------
# Same networks as forward_vars, without graph building. Used on hot paths
# (SAC updates); the graph version serves as the reference in tests.

def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _act_fwd(name: str, pre: np.ndarray) -> np.ndarray:
    if name == "relu":
        return np.maximum(pre, 0.0)
    if name == "tanh":
        return np.tanh(pre)
    return pre * _sigmoid(pre)


def _act_grad(name: str, pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    if name == "relu":
        return (pre > 0.0).astype(np.float64)
    if name == "tanh":
        return 1.0 - post ** 2
    sig = _sigmoid(pre)
    return sig + pre * sig * (1.0 - sig)


class ForwardCache(NamedTuple):
    inputs: list  # input to each layer
    pres: list  # pre-activations of hidden layers
    head: np.ndarray | None  # raw log-std logits for a Gaussian head


def forward_cached(spec: MLPSpec, tensors: Mapping[str, np.ndarray], x: np.ndarray):
    """Plain-array forward pass; returns ``(output, cache)`` for :func:`backward_cached`.

    ``output`` is ``(mean, log_std)`` for a Gaussian head, else an array.
    """
    h = np.asarray(x, dtype=np.float64)
    inputs, pres = [], []
    n_layers = len(spec.layer_dims)
    for i in range(n_layers):
        inputs.append(h)
        h = h @ tensors[f"l{i}.W"] + tensors[f"l{i}.b"]
        if i < n_layers - 1:
            pres.append(h)
            h = _act_fwd(spec.activation, h)
    if not spec.gaussian_head:
        return h, ForwardCache(inputs, pres, None)
    d = spec.output_dim
    lo, hi = spec.log_std_bounds
    raw = h[..., d:]
    log_std = lo + np.logaddexp(0.0, hi - np.logaddexp(0.0, hi - raw) - lo) * ag.clamp_scale(lo, hi)
    return (h[..., :d], log_std), ForwardCache(inputs, pres, raw)


def backward_cached(spec: MLPSpec, tensors: Mapping[str, np.ndarray], cache: ForwardCache, d_out):
    """Gradients of a scalar w.r.t. every parameter and the input, given d(scalar)/d(output).

    ``d_out`` is ``(d_mean, d_log_std)`` for a Gaussian head. Returns
    ``(grads: dict name -> array, d_input)``; ``d_input`` is summed over
    ensemble members when the input was shared.
    """
    if spec.gaussian_head:
        d_mean, d_log_std = d_out
        lo, hi = spec.log_std_bounds
        raw = cache.head
        inner = hi - np.logaddexp(0.0, hi - raw)
        d_raw = d_log_std * _sigmoid(hi - raw) * _sigmoid(inner - lo) * ag.clamp_scale(lo, hi)
        g = np.concatenate([d_mean, d_raw], axis=-1)
    else:
        g = np.asarray(d_out, dtype=np.float64)
    grads = {}
    ensemble = spec.n_members is not None
    for i in reversed(range(len(spec.layer_dims))):
        h_in = cache.inputs[i]
        W = tensors[f"l{i}.W"]
        grads[f"l{i}.W"] = np.swapaxes(h_in, -1, -2) @ g
        if ensemble:
            grads[f"l{i}.b"] = g.sum(axis=-2, keepdims=True)
        else:
            grads[f"l{i}.b"] = g.reshape(-1, g.shape[-1]).sum(axis=0)
        g = g @ np.swapaxes(W, -1, -2)
        if i > 0:
            pre = cache.pres[i - 1]
            g = g * _act_grad(spec.activation, pre, h_in)
    if ensemble and np.ndim(cache.inputs[0]) == 2 and g.ndim == 3:
        g = g.sum(axis=0)
    return grads, g


def param_gradient(spec: MLPSpec, params: ParamVector, grads: Mapping[str, np.ndarray]) -> ParamVector:
    """Pack per-tensor gradients into a ParamVector with ``params``' layout."""
    return ParamVector.from_tensors({n: grads[n] for n, _ in params.layout})
