"""Desk-scale environments.

Continuous-control tasks (pendulum swing-up, cartpole swing-up, 2-D point
mass) for the full training pipeline, and finite MDPs for exact
verification. Every continuous task exposes pure ``reward_fn(s, a)`` and
``termination_fn(s_next)`` so the same predicates can be applied to
model-predicted states.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .exceptions import UsageError


class Transition(NamedTuple):
    s: np.ndarray
    a: np.ndarray
    r: float
    s_next: np.ndarray
    done: bool


@dataclass(frozen=True)
class TaskSpec:
    name: str
    state_dim: int
    action_dim: int
    dt: float
    max_steps: int
    r_max: float
    solved_threshold: float
    substeps: int = 1


class ContinuousEnv:
    """Base class: semi-implicit Euler integration of ``_accel`` at ``dt / substeps``."""

    spec: TaskSpec

    def __init__(self, seed=None):
        self.rng = np.random.default_rng(seed)
        self.state: np.ndarray | None = None
        self.steps = 0
        self._done = True

    # subclass interface ---------------------------------------------------
    def _sample_initial(self) -> np.ndarray:
        raise NotImplementedError

    def _integrate(self, state: np.ndarray, action: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def reward_fn(s: np.ndarray, a: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def termination_fn(s_next: np.ndarray) -> np.ndarray:
        return np.zeros(np.shape(s_next)[:-1], dtype=bool)

    # public API ---------------------------------------------------------------
    def reset(self) -> np.ndarray:
        self.state = self._sample_initial()
        self.steps = 0
        self._done = False
        return self.state.copy()

    @property
    def done(self) -> bool:
        return self._done

    @property
    def truncated(self) -> bool:
        return self.steps >= self.spec.max_steps

    def step(self, action) -> Transition:
        if self.state is None or self._done:
            raise UsageError("step() called on a finished episode; call reset() first")
        a = np.clip(np.asarray(action, dtype=np.float64).reshape(self.spec.action_dim), -1.0, 1.0)
        s = self.state
        r = float(self.reward_fn(s, a))
        assert abs(r) <= self.spec.r_max + 1e-9, f"reward {r} exceeds declared R_max {self.spec.r_max}"
        s_next = self._integrate(s, a)
        terminated = bool(self.termination_fn(s_next))
        self.state = s_next
        self.steps += 1
        self._done = terminated or self.steps >= self.spec.max_steps
        return Transition(s.copy(), a, r, s_next.copy(), terminated)


class Pendulum(ContinuousEnv):
    """Torque-limited pendulum swing-up; theta = 0 is upright, theta = pi hangs down.

    Observation is (cos theta, sin theta, omega). The angle cost is
    2 (1 - cos theta), which matches theta**2 near upright but stays smooth
    at the bottom, so a learned reward head can represent it. A smooth cost
    is flat at the bottom, so the speed penalty is kept light: small swings
    must pay for themselves or hanging still becomes a local optimum.
    """

    spec = TaskSpec("pendulum", 3, 1, dt=0.05, max_steps=200,
                    r_max=4.0 + 0.01 * 8.0 ** 2 + 0.001 * 2.0 ** 2,
                    solved_threshold=-400.0, substeps=40)
    gravity = 10.0
    mass = 1.0
    length = 1.0
    max_torque = 2.0
    max_speed = 8.0

    def __init__(self, seed=None, torque_enabled: bool = True, speed_limit: bool = True):
        super().__init__(seed)
        self.torque_enabled = torque_enabled
        self.speed_limit = speed_limit

    @classmethod
    def from_angle(cls, theta: float, omega: float, **kw) -> "Pendulum":
        env = cls(**kw)
        env.state = np.array([np.cos(theta), np.sin(theta), omega])
        env.steps = 0
        env._done = False
        return env

    def _sample_initial(self):
        theta = self.rng.uniform(-np.pi, np.pi)
        omega = self.rng.uniform(-1.0, 1.0)
        return np.array([np.cos(theta), np.sin(theta), omega])

    def accel(self, theta, torque):
        return 3.0 * self.gravity / (2.0 * self.length) * np.sin(theta) + 3.0 / (self.mass * self.length ** 2) * torque

    def energy(self, theta, omega):
        """Conserved quantity of the unactuated dynamics (per unit moment of inertia)."""
        return 0.5 * omega ** 2 + 3.0 * self.gravity / (2.0 * self.length) * np.cos(theta)

    def _integrate(self, state, action):
        # plain floats: this inner loop dominates environment cost
        theta = math.atan2(state[1], state[0])
        omega = float(state[2])
        torque = self.max_torque * float(action[0]) if self.torque_enabled else 0.0
        h = self.spec.dt / self.spec.substeps
        k_grav = 3.0 * self.gravity / (2.0 * self.length)
        k_torque = 3.0 / (self.mass * self.length ** 2) * torque
        lim = self.max_speed if self.speed_limit else math.inf
        for _ in range(self.spec.substeps):
            omega = min(max(omega + h * (k_grav * math.sin(theta) + k_torque), -lim), lim)
            theta = theta + h * omega
        return np.array([math.cos(theta), math.sin(theta), omega])

    @staticmethod
    def reward_fn(s, a):
        s = np.asarray(s)
        omega = np.clip(s[..., 2], -Pendulum.max_speed, Pendulum.max_speed)
        u = Pendulum.max_torque * np.clip(np.asarray(a)[..., 0], -1.0, 1.0)
        return -(2.0 * (1.0 - np.clip(s[..., 0], -1.0, 1.0)) + 0.01 * omega ** 2 + 0.001 * u ** 2)


class CartpoleSwingup(ContinuousEnv):
    """Cart-pole starting with the pole down; observation (x, x_dot, cos th, sin th, th_dot)."""

    x_limit = 2.4
    spec = TaskSpec("cartpole_swingup", 5, 1, dt=0.05, max_steps=200,
                    r_max=1.0 + 0.01 * 2.4 ** 2 + 0.001, solved_threshold=80.0, substeps=5)
    gravity = 9.8
    mass_cart = 1.0
    mass_pole = 0.1
    half_length = 0.5
    max_force = 10.0

    def _sample_initial(self):
        x, x_dot, th_dot = self.rng.normal(0.0, 0.05, size=3)
        th = np.pi + self.rng.normal(0.0, 0.05)
        return np.array([x, x_dot, np.cos(th), np.sin(th), th_dot])

    def _integrate(self, state, action):
        x, x_dot, c, s, th_dot = state
        th = np.arctan2(s, c)
        force = self.max_force * action[0]
        total = self.mass_cart + self.mass_pole
        pml = self.mass_pole * self.half_length
        h = self.spec.dt / self.spec.substeps
        for _ in range(self.spec.substeps):
            sin, cos = np.sin(th), np.cos(th)
            tmp = (force + pml * th_dot ** 2 * sin) / total
            th_acc = (self.gravity * sin - cos * tmp) / (
                self.half_length * (4.0 / 3.0 - self.mass_pole * cos ** 2 / total))
            x_acc = tmp - pml * th_acc * cos / total
            x_dot = x_dot + h * x_acc
            th_dot = th_dot + h * th_acc
            x = x + h * x_dot
            th = th + h * th_dot
        return np.array([x, x_dot, np.cos(th), np.sin(th), th_dot])

    @staticmethod
    def reward_fn(s, a):
        s = np.asarray(s)
        x = np.clip(s[..., 0], -CartpoleSwingup.x_limit, CartpoleSwingup.x_limit)
        u = np.clip(np.asarray(a)[..., 0], -1.0, 1.0)
        return s[..., 2] - 0.01 * x ** 2 - 0.001 * u ** 2

    @staticmethod
    def termination_fn(s_next):
        return np.abs(np.asarray(s_next)[..., 0]) > CartpoleSwingup.x_limit


class PointMass(ContinuousEnv):
    """Damped 2-D point mass that must reach the origin; observation (x, y, vx, vy)."""

    box = 2.0
    spec = TaskSpec("pointmass", 4, 2, dt=0.1, max_steps=200,
                    r_max=np.sqrt(2.0) * 2.0 + 0.02, solved_threshold=-80.0, substeps=2)
    damping = 0.5
    max_force = 2.0

    def _sample_initial(self):
        pos = self.rng.uniform(-self.box, self.box, size=2)
        return np.concatenate([pos, np.zeros(2)])

    def _integrate(self, state, action):
        pos, vel = state[:2].copy(), state[2:].copy()
        force = self.max_force * action
        h = self.spec.dt / self.spec.substeps
        for _ in range(self.spec.substeps):
            vel = vel + h * (force - self.damping * vel)
            pos = pos + h * vel
            hit = np.abs(pos) > self.box
            pos = np.clip(pos, -self.box, self.box)
            vel = np.where(hit, 0.0, vel)
        return np.concatenate([pos, vel])

    @staticmethod
    def reward_fn(s, a):
        s = np.asarray(s)
        pos = np.clip(s[..., :2], -PointMass.box, PointMass.box)
        u = np.clip(np.asarray(a), -1.0, 1.0)
        return -np.linalg.norm(pos, axis=-1) - 0.01 * np.sum(u ** 2, axis=-1)


TASKS: dict[str, type[ContinuousEnv]] = {
    "pendulum": Pendulum,
    "cartpole_swingup": CartpoleSwingup,
    "pointmass": PointMass,
}


def make_env(task: str, seed=None) -> ContinuousEnv:
    try:
        cls = TASKS[task]
    except KeyError:
        raise UsageError(f"unknown task {task!r}; choose from {sorted(TASKS)}") from None
    return cls(seed=seed)


def task_spec(task: str) -> TaskSpec:
    if task not in TASKS:
        raise UsageError(f"unknown task {task!r}; choose from {sorted(TASKS)}")
    return TASKS[task].spec


def termination_fn(task: str) -> Callable[[np.ndarray], np.ndarray]:
    return TASKS[task].termination_fn


# Finite MDPs ----------------------------------------------------------------

@dataclass(frozen=True)
class TabularMDP:
    P: np.ndarray  # (S, A, S)
    R: np.ndarray  # (S, A)
    gamma: float
    rho0: np.ndarray
    r_max: float = 1.0

    def __post_init__(self):
        P = np.asarray(self.P, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        rho0 = np.asarray(self.rho0, dtype=np.float64)
        if P.ndim != 3 or P.shape[0] != P.shape[2] or R.shape != P.shape[:2] or rho0.shape != (P.shape[0],):
            raise UsageError(f"inconsistent shapes P{P.shape} R{R.shape} rho0{rho0.shape}")
        if np.any(P < 0) or np.max(np.abs(P.sum(-1) - 1.0)) > 1e-12:
            raise UsageError("transition rows must be nonnegative and sum to 1")
        if np.any(rho0 < 0) or abs(rho0.sum() - 1.0) > 1e-12:
            raise UsageError("rho0 must be a distribution")
        if not 0.0 <= self.gamma < 1.0:
            raise UsageError("gamma must lie in [0, 1)")
        if np.max(np.abs(R)) > self.r_max + 1e-12:
            raise UsageError("rewards exceed r_max")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "rho0", rho0)

    @property
    def n_states(self) -> int:
        return self.P.shape[0]

    @property
    def n_actions(self) -> int:
        return self.P.shape[1]

    def with_transitions(self, P: np.ndarray) -> "TabularMDP":
        return TabularMDP(P, self.R, self.gamma, self.rho0, self.r_max)


def _normalize_rows(P: np.ndarray) -> np.ndarray:
    return P / P.sum(axis=-1, keepdims=True)


def random_mdp(S: int, A: int, gamma: float, seed=None, sparsity: float = 0.0, r_max: float = 1.0) -> TabularMDP:
    """Random finite MDP with Dirichlet transition rows and uniform rewards in [-r_max, r_max].

    ``sparsity`` in [0, 1] controls the number of reachable successors per
    (s, a): 0 gives dense rows, 1 gives deterministic one-hot rows.
    """
    if S < 2 or A < 1:
        raise UsageError("need S >= 2 and A >= 1")
    if not 0.0 <= sparsity <= 1.0:
        raise UsageError("sparsity must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    k = max(1, int(round((1.0 - sparsity) * (S - 1))) + 1)
    P = np.zeros((S, A, S))
    for s in range(S):
        for a in range(A):
            support = rng.choice(S, size=k, replace=False)
            P[s, a, support] = rng.dirichlet(np.ones(k))
    P = _normalize_rows(P)
    R = rng.uniform(-r_max, r_max, size=(S, A))
    rho0 = rng.dirichlet(np.ones(S))
    rho0 = rho0 / rho0.sum()
    return TabularMDP(P, R, gamma, rho0, r_max)
