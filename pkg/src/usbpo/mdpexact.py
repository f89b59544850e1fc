"""Exact finite-MDP quantities and numerical checks of the performance-difference bound chain.

Values follow the undiscounted-sum convention V = E[sum_t gamma^t r_t];
visitation measures are normalized by (1 - gamma) so they sum to one.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .envs import TabularMDP, random_mdp
from .exceptions import UsageError
from .gaussmetrics import discrete_metric, discrete_wasserstein, tvd_rows

THEOREM_IDS = ("T1_decomposition", "T2_return_bound", "T3_decomp_tvd",
               "T4_unified", "T5_delta_upper", "L2_joint_tvd")
ASSERT_MODE = ("T1_decomposition", "T2_return_bound", "T5_delta_upper", "L2_joint_tvd")
REPORT_MODE = ("T3_decomp_tvd", "T4_unified")


@dataclass(frozen=True)
class PolicyTable:
    pi: np.ndarray

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=np.float64)
        if pi.ndim != 2 or np.any(pi < 0) or np.max(np.abs(pi.sum(-1) - 1.0)) > 1e-12:
            raise UsageError("policy rows must be nonnegative and sum to 1")
        object.__setattr__(self, "pi", pi)


@dataclass(frozen=True)
class VisitationMeasure:
    d: np.ndarray  # (S, A)

    @property
    def state_marginal(self) -> np.ndarray:
        return self.d.sum(axis=1)


def _pi(policy) -> np.ndarray:
    return policy.pi if isinstance(policy, PolicyTable) else np.asarray(policy, dtype=np.float64)


def _policy_kernel(mdp: TabularMDP, pi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    P_pi = np.einsum("sa,sat->st", pi, mdp.P)
    r_pi = np.einsum("sa,sa->s", pi, mdp.R)
    return P_pi, r_pi


def exact_value(mdp: TabularMDP, policy) -> tuple[np.ndarray, float]:
    """Solve (I - gamma P_pi) V = r_pi; returns per-state values and rho0 . V."""
    pi = _pi(policy)
    if pi.shape != mdp.R.shape:
        raise UsageError(f"policy shape {pi.shape} does not match MDP {mdp.R.shape}")
    P_pi, r_pi = _policy_kernel(mdp, pi)
    V = np.linalg.solve(np.eye(mdp.n_states) - mdp.gamma * P_pi, r_pi)
    return V, float(mdp.rho0 @ V)


def exact_visitation(mdp: TabularMDP, policy) -> VisitationMeasure:
    """d(s, a) = (1 - gamma) sum_t gamma^t p_t(s) pi(a|s)."""
    pi = _pi(policy)
    if pi.shape != mdp.R.shape:
        raise UsageError(f"policy shape {pi.shape} does not match MDP {mdp.R.shape}")
    P_pi, _ = _policy_kernel(mdp, pi)
    occ = np.linalg.solve((np.eye(mdp.n_states) - mdp.gamma * P_pi).T, mdp.rho0)
    return VisitationMeasure((1.0 - mdp.gamma) * occ[:, None] * pi)


def state_marginals(mdp: TabularMDP, policy, horizon: int) -> np.ndarray:
    """p_t(s) for t = 0..horizon-1, shape (horizon, S)."""
    P_pi, _ = _policy_kernel(mdp, _pi(policy))
    out = np.empty((horizon, mdp.n_states))
    p = mdp.rho0.copy()
    for t in range(horizon):
        out[t] = p
        p = p @ P_pi
    return out


def model_tvd_table(mdp_a: TabularMDP, mdp_b: TabularMDP) -> np.ndarray:
    """Per-(s, a) total variation between the two transition kernels."""
    if mdp_a.P.shape != mdp_b.P.shape:
        raise UsageError(f"shape mismatch {mdp_a.P.shape} vs {mdp_b.P.shape}")
    return tvd_rows(mdp_a.P, mdp_b.P)


def expected_model_tvd(mdp_a: TabularMDP, mdp_b: TabularMDP, weight: VisitationMeasure) -> float:
    table = model_tvd_table(mdp_a, mdp_b)
    if weight.d.shape != table.shape:
        raise UsageError("visitation measure does not match the MDP shape")
    return float(np.sum(weight.d * table))


def policy_tvd(pi1, pi2) -> float:
    """max_s TV(pi1(.|s), pi2(.|s))."""
    return float(np.max(tvd_rows(_pi(pi1), _pi(pi2))))


def compute_delta(m1: TabularMDP, m2: TabularMDP, mstar: TabularMDP, pi1, pi2) -> float:
    """E_{d(pi1, m1)}[TV(m2, m*)] - E_{d(pi2, m2)}[TV(m2, m*)]."""
    d1 = exact_visitation(m1, pi1)
    d2 = exact_visitation(m2, pi2)
    return expected_model_tvd(m2, mstar, d1) - expected_model_tvd(m2, mstar, d2)


# Instances ---------------------------------------------------------------------

@dataclass(frozen=True)
class BoundInstance:
    mstar: TabularMDP
    m1: TabularMDP
    m2: TabularMDP
    pi1: np.ndarray
    pi2: np.ndarray
    seed: int = 0

    @property
    def gamma(self) -> float:
        return self.mstar.gamma

    @property
    def r_max(self) -> float:
        return self.mstar.r_max


def random_policy(S: int, A: int, rng: np.random.Generator) -> np.ndarray:
    pi = rng.dirichlet(np.ones(A), size=S)
    return pi / pi.sum(-1, keepdims=True)


def _mix(a: np.ndarray, b: np.ndarray, w: float) -> np.ndarray:
    out = (1.0 - w) * a + w * b
    return out / out.sum(-1, keepdims=True)


def random_instance(S: int, A: int, gamma: float, seed: int, model_mix: float = 0.5,
                    policy_mix: float = 0.2, r_max: float = 1.0) -> BoundInstance:
    """Sample (M*, M1, M2, pi1, pi2).

    M1 and M2 share M*'s rewards and initial distribution; their kernels are
    mixtures of M*'s with independent random kernels, mixing weights drawn
    from [0, model_mix]. pi2 mixes pi1 with a random policy using a weight
    drawn from [0, policy_mix].
    """
    rng = np.random.default_rng(seed)
    mstar = random_mdp(S, A, gamma, seed=rng.integers(2 ** 32), r_max=r_max)
    models = []
    for _ in range(2):
        noise = random_mdp(S, A, gamma, seed=rng.integers(2 ** 32)).P
        models.append(mstar.with_transitions(_mix(mstar.P, noise, rng.uniform(0.0, model_mix))))
    pi1 = random_policy(S, A, rng)
    pi2 = _mix(pi1, random_policy(S, A, rng), rng.uniform(0.0, policy_mix))
    return BoundInstance(mstar, models[0], models[1], pi1, pi2, seed)


# Bound checks -------------------------------------------------------------------

@dataclass
class BoundReport:
    theorem: str
    lhs: float
    rhs: float
    slack: float
    seed: int
    S: int
    A: int
    gamma: float
    aux: dict = field(default_factory=dict)
    passed: bool = True
    mode: str = "assert"

    def to_json(self) -> str:
        rec = {"theorem": self.theorem, "seed": self.seed, "S": self.S, "A": self.A,
               "gamma": self.gamma, "lhs": self.lhs, "rhs": self.rhs, "slack": self.slack,
               "aux": self.aux, "mode": self.mode, "passed": self.passed}
        return json.dumps(rec, sort_keys=False)

    @property
    def digest(self) -> str:
        return hashlib.sha256(f"{self.seed}:{self.S}:{self.A}:{self.gamma}".encode()).hexdigest()[:16]


def instance_terms(inst: BoundInstance) -> dict[str, float]:
    """All scalar quantities the bound chain refers to, computed exactly."""
    gamma, r_max = inst.gamma, inst.r_max
    d1 = exact_visitation(inst.m1, inst.pi1)
    d2 = exact_visitation(inst.m2, inst.pi2)
    bias2_table = model_tvd_table(inst.m2, inst.mstar)
    terms = {
        "V_true_1": exact_value(inst.mstar, inst.pi1)[1],
        "V_true_2": exact_value(inst.mstar, inst.pi2)[1],
        "V_model_1": exact_value(inst.m1, inst.pi1)[1],
        "V_model_2": exact_value(inst.m2, inst.pi2)[1],
        "eps_pi": policy_tvd(inst.pi1, inst.pi2),
        "eps_m": expected_model_tvd(inst.m1, inst.m2, d1),
        "eps_1": expected_model_tvd(inst.m1, inst.mstar, d1),
        "eps_2": expected_model_tvd(inst.m2, inst.mstar, d2),
        "bias_d1": float(np.sum(d1.d * bias2_table)),
        "max_bias_2": float(bias2_table.max()),
        "kappa": 2.0 * r_max / (1.0 - gamma) ** 2,
        "r_max": r_max,
    }
    terms["delta"] = terms["bias_d1"] - float(np.sum(d2.d * bias2_table))
    return terms


def _aux(t: dict) -> dict:
    return {"eps_pi": t["eps_pi"], "eps_m": t["eps_m"], "eps_1": t["eps_1"], "eps_2": t["eps_2"],
            "delta": t["delta"], "bias": t["bias_d1"], "kappa": t["kappa"], "r_max": t["r_max"]}


def lemma2_check(rng: np.random.Generator, nx: int, ny: int) -> tuple[float, float]:
    """Random joint factorizations p(x)p(y|x), q(x)q(y|x); returns (lhs, rhs) by enumeration."""
    px, qx = rng.dirichlet(np.ones(nx)), rng.dirichlet(np.ones(nx))
    py, qy = rng.dirichlet(np.ones(ny), size=nx), rng.dirichlet(np.ones(ny), size=nx)
    lhs = 0.0
    for x in range(nx):
        for y in range(ny):
            lhs += abs(px[x] * py[x, y] - qx[x] * qy[x, y])
    lhs *= 0.5
    rhs = 0.5 * np.abs(px - qx).sum() + max(0.5 * np.abs(py[x] - qy[x]).sum() for x in range(nx))
    return float(lhs), float(rhs)


def verify_theorem(theorem: str, inst: BoundInstance, tolerance: float = 1e-8,
                   terms: dict | None = None) -> BoundReport:
    """Evaluate one link of the bound chain on an exact instance."""
    if theorem not in THEOREM_IDS:
        raise UsageError(f"unknown theorem id {theorem!r}; choose from {THEOREM_IDS}")
    t = instance_terms(inst) if terms is None else terms
    gamma, kappa = inst.gamma, t["kappa"]
    S, A = inst.mstar.n_states, inst.mstar.n_actions
    mode = "report" if theorem in REPORT_MODE else "assert"
    gap_true = t["V_true_2"] - t["V_true_1"]
    if theorem == "T1_decomposition":
        lhs = gap_true
        rhs = (t["V_true_2"] - t["V_model_2"]) - (t["V_true_1"] - t["V_model_1"]) + (t["V_model_2"] - t["V_model_1"])
    elif theorem == "T2_return_bound":
        lhs = t["V_model_2"] - t["V_model_1"]
        rhs = -2.0 * t["r_max"] * (t["eps_pi"] + gamma * t["eps_m"]) / (1.0 - gamma) ** 2
    elif theorem == "T3_decomp_tvd":
        lhs = gap_true
        rhs = kappa * gamma * (t["eps_1"] - t["eps_2"] - t["eps_m"]) - kappa * t["eps_pi"]
    elif theorem == "T4_unified":
        lhs = gap_true
        inner = t["eps_1"] - t["eps_m"] - t["bias_d1"]
        rhs = kappa * (gamma * (inner + t["delta"]) - t["eps_pi"])
    elif theorem == "T5_delta_upper":
        lhs = abs(t["delta"])
        rhs = 2.0 * t["max_bias_2"] * (gamma * t["eps_m"] + t["eps_pi"]) / (1.0 - gamma)
    else:  # L2_joint_tvd
        lhs, rhs = lemma2_check(np.random.default_rng(inst.seed), S, max(A, 2))
    if theorem in ("T5_delta_upper", "L2_joint_tvd"):
        # upper bounds: slack = bound - quantity
        slack = rhs - lhs
    else:
        slack = lhs - rhs
    if theorem == "T1_decomposition":
        passed = abs(slack) <= tolerance
    else:
        passed = slack >= -tolerance
    return BoundReport(theorem, lhs, rhs, slack, inst.seed, S, A, gamma, _aux(t),
                       passed=passed if mode == "assert" else True, mode=mode)


def verify_all(inst: BoundInstance, tolerance: float = 1e-8, identity_tolerance: float = 1e-10) -> list[BoundReport]:
    terms = instance_terms(inst)
    return [verify_theorem(tid, inst, identity_tolerance if tid == "T1_decomposition" else tolerance, terms)
            for tid in THEOREM_IDS]


def run_trials(trials: int, S: int, A: int, gamma: float, seed: int) -> list[BoundReport]:
    if S < 2 or A < 1:
        raise UsageError("need S >= 2 and A >= 1")
    if not 0.0 < gamma < 1.0:
        raise UsageError("gamma must lie in (0, 1)")
    seeds = np.random.SeedSequence(seed).generate_state(max(trials, 1), dtype=np.uint32)[:trials]
    reports = []
    for s in seeds:
        reports.extend(verify_all(random_instance(S, A, gamma, int(s))))
    return reports


def delta_magnitude_summary(reports: Iterable[BoundReport]) -> dict[str, float]:
    """Median |delta| against the median shift and bias terms over a set of trials."""
    recs = [r for r in reports if r.theorem == "T4_unified"]
    delta = np.array([abs(r.aux["delta"]) for r in recs])
    shift = np.array([r.aux["eps_m"] for r in recs])
    bias = np.array([r.aux["bias"] for r in recs])
    return {
        "n": len(recs),
        "median_abs_delta": float(np.median(delta)) if len(recs) else 0.0,
        "median_shift": float(np.median(shift)) if len(recs) else 0.0,
        "median_bias": float(np.median(bias)) if len(recs) else 0.0,
    }


def slack_histogram(reports: Iterable[BoundReport], theorem: str, bins: int = 10) -> dict:
    slacks = np.array([r.slack for r in reports if r.theorem == theorem])
    if slacks.size == 0:
        return {"theorem": theorem, "counts": [], "edges": []}
    counts, edges = np.histogram(slacks, bins=bins)
    return {"theorem": theorem, "counts": counts.tolist(), "edges": edges.tolist(),
            "min": float(slacks.min()), "median": float(np.median(slacks)),
            "fraction_negative": float(np.mean(slacks < 0))}


# IPM bridge ------------------------------------------------------------------------

def ipm_bounded_exact(p: np.ndarray, q: np.ndarray, c: float) -> float:
    """sup over |f| <= c of |E_p f - E_q f| = c * sum|p - q| = 2c TV(p, q)."""
    return float(c * np.abs(np.asarray(p) - np.asarray(q)).sum())


def ipm_vertex_enumeration(p: np.ndarray, q: np.ndarray, lo: float, hi: float) -> float:
    """Brute-force sup over the box lo <= f <= hi by enumerating its vertices."""
    p, q = np.asarray(p), np.asarray(q)
    n = p.size
    best = 0.0
    for mask in range(2 ** n):
        f = np.array([hi if (mask >> i) & 1 else lo for i in range(n)])
        best = max(best, abs(float((p - q) @ f)))
    return best


def ipm_bridge_check(mdp_a: TabularMDP, mdp_b: TabularMDP, n_policies: int = 32, seed: int = 0,
                     ground: np.ndarray | None = None) -> dict:
    """Compare value-class IPM, TVD, W1 and W2 per (s, a) for a pair of kernels.

    The function class is {V^pi_{mdp_a}} over random policies. Every such V
    takes values in [min R, max R] / (1 - gamma), so the testable bound is
    sup |E_p V - E_q V| <= (max R - min R) / (1 - gamma) * TV(p, q); with
    nonnegative rewards bounded by R_max this is R_max / (1 - gamma) * TV.
    """
    rng = np.random.default_rng(seed)
    S, A = mdp_a.n_states, mdp_a.n_actions
    ground = discrete_metric(S) if ground is None else ground
    values = np.array([exact_value(mdp_a, random_policy(S, A, rng))[0] for _ in range(n_policies)])
    span = float(mdp_a.R.max() - mdp_a.R.min()) / (1.0 - mdp_a.gamma)
    tv = model_tvd_table(mdp_a, mdp_b)
    ipm = np.zeros((S, A))
    w1 = np.zeros((S, A))
    w2 = np.zeros((S, A))
    for s in range(S):
        for a in range(A):
            diff = mdp_a.P[s, a] - mdp_b.P[s, a]
            ipm[s, a] = float(np.max(np.abs(values @ diff)))
            w1[s, a] = discrete_wasserstein(mdp_a.P[s, a], mdp_b.P[s, a], ground, order=1)
            w2[s, a] = discrete_wasserstein(mdp_a.P[s, a], mdp_b.P[s, a], ground, order=2)
    bound = span * tv
    with np.errstate(divide="ignore", invalid="ignore"):
        lv = np.where(w1 > 0, ipm / w1, 0.0)
    return {
        "ipm": ipm, "tvd": tv, "w1": w1, "w2": w2, "bound": bound,
        "ipm_within_bound": bool(np.all(ipm <= bound + 1e-10)),
        "w1_le_w2": bool(np.all(w1 <= w2 + 1e-9)),
        "empirical_lv": float(lv.max()),
    }
