import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from usbpo.dynamics import (EnsembleDynamics, ShiftBiasEstimate, branch_rollout, estimate_bias,
                            estimate_shift, estimate_shift_bias, fine_tune, phase2_gradient,
                            transition_arrays)
from usbpo.exceptions import NonFiniteError, UsageError
from usbpo.nncore.params import ParamVector


def small_model(n_members=4, n_elites=2, seed=0, **kw):
    kw.setdefault("hidden", (16, 16))
    return EnsembleDynamics(2, 1, n_members=n_members, n_elites=n_elites, random_state=seed, **kw).initialize()


def set_tensors(model, **updates):
    t = {k: v.copy() for k, v in model.params_.tensors().items()}
    for name, fn in updates.items():
        t[name.replace("_", ".")] = fn(t[name.replace("_", ".")])
    model.params_ = ParamVector.from_tensors(t)
    return model


def shared_members(model, source=0):
    """Overwrite every member with a copy of ``source``."""
    t = {k: np.repeat(v[source:source + 1], v.shape[0], axis=0) for k, v in model.params_.tensors().items()}
    model.params_ = ParamVector.from_tensors(t)
    return model


@pytest.fixture
def batch(rng):
    return rng.normal(size=(64, 3))


def linear_system(n, seed):
    rng = np.random.default_rng(seed)
    A = np.array([[0.9, 0.1], [-0.2, 0.95]])
    Bm = np.array([[0.0], [0.3]])
    s = rng.uniform(-1, 1, (n, 2))
    a = rng.uniform(-1, 1, (n, 1))
    s_next = s @ A.T + a @ Bm.T
    r = s[:, 0] - 0.5 * a[:, 0]
    return transition_arrays(s, a, r, s_next)


def test_fit_recovers_linear_system():
    X, y = linear_system(5000, 0)
    # least squares reproduces the targets exactly, so the system is representable
    coef, *_ = np.linalg.lstsq(np.c_[X, np.ones(len(X))], y, rcond=None)
    assert np.mean((np.c_[X, np.ones(len(X))] @ coef - y) ** 2) < 1e-20

    model = EnsembleDynamics(2, 1, n_members=3, n_elites=2, hidden=(32, 32), max_epochs=40,
                             patience=40, random_state=0).fit(X, y)
    Xh, yh = linear_system(1000, 1)
    assert np.mean((model.predict(Xh) - yh) ** 2) < 1e-3
    assert model.score(Xh, yh) > 0


def test_single_repeated_transition_collapses_variance():
    X = np.tile([[0.2, -0.4, 0.5]], (256, 1))
    y = np.tile([[0.1, -0.3, 1.5]], (256, 1))
    model = EnsembleDynamics(2, 1, n_members=2, n_elites=1, hidden=(16,), lr=1e-2, max_epochs=300,
                             patience=300, random_state=0).fit(X, y)
    mean, std = model.predict_dist(X[:1])
    assert np.allclose(mean[model.elites_[0], 0], y[0], atol=1e-2)
    assert np.all(std < 0.05)


def test_reshuffling_seed_changes_parameters_not_architecture():
    X, y = linear_system(300, 2)
    a = EnsembleDynamics(2, 1, n_members=2, n_elites=1, hidden=(8,), max_epochs=2, random_state=0).fit(X, y)
    b = EnsembleDynamics(2, 1, n_members=2, n_elites=1, hidden=(8,), max_epochs=2, random_state=1).fit(X, y)
    assert a.spec_ == b.spec_ and a.params_.layout == b.params_.layout
    assert not np.array_equal(a.params_.values, b.params_.values)


def test_fit_is_deterministic_for_a_seed():
    X, y = linear_system(300, 3)
    fits = [EnsembleDynamics(2, 1, n_members=2, n_elites=1, hidden=(8,), max_epochs=3, random_state=5).fit(X, y)
            for _ in range(2)]
    assert fits[0].params_.values.tobytes() == fits[1].params_.values.tobytes()


def test_estimator_api():
    model = EnsembleDynamics(2, 1, n_members=3, n_elites=2, hidden=(8,), random_state=0)
    assert clone(model).get_params() == model.get_params()
    with pytest.raises(NotFittedError):
        model.predict(np.zeros((1, 3)))
    with pytest.raises(UsageError):
        EnsembleDynamics(2, 1, n_members=2, n_elites=3).initialize()
    X, y = linear_system(10, 0)
    with pytest.raises(UsageError):
        model.fit(X, y[:5])
    with pytest.raises(UsageError):
        model.fit(X[:1], y[:1])


def test_shift_is_zero_against_itself(batch):
    model = small_model()
    snap = model.snapshot()
    for k in range(model.n_members):
        assert estimate_shift(snap, model, batch, k, k) == 0.0


def test_shift_of_constant_mean_offset(batch):
    model = small_model()
    snap = model.snapshot()
    c, k = 0.3, 1
    out = model.spec_.output_dim

    def bump(b):
        b[k, 0, :out] += c
        return b

    set_tensors(model, l2_b=bump)
    assert estimate_shift(snap, model, batch, k, k) == pytest.approx(c * np.sqrt(out), rel=1e-12)


def test_shift_positive_after_random_perturbation(batch, rng):
    model = small_model()
    snap = model.snapshot()
    model.params_ = model.params_.with_values(model.params_.values + 1e-3 * rng.normal(size=len(model.params_)))
    assert estimate_shift(snap, model, batch, 0, 0) > 0


def test_bias_zero_for_identical_members(batch):
    assert estimate_bias(shared_members(small_model()), batch, 0) == 0.0


def test_bias_of_two_members_with_unit_offset(batch):
    model = shared_members(small_model(n_members=2, n_elites=1))
    set_tensors(model, l2_b=lambda b: b + np.array([0.0, 1.0])[:, None, None] * np.eye(1, b.shape[-1], 2))
    assert estimate_bias(model, batch, 0) == pytest.approx(1.0, rel=1e-12)


def test_bias_matches_pairwise_closed_form(batch):
    model = small_model(n_members=4)
    mu, sd = model.predict_dist(batch)
    # W2 between diagonal Gaussians: sqrt(|mu1 - mu2|^2 + |sd1 - sd2|^2)
    oracle = np.mean([np.mean([np.sqrt(np.sum((mu[0, i] - mu[b, i]) ** 2) + np.sum((sd[0, i] - sd[b, i]) ** 2))
                               for b in (1, 2, 3)]) for i in range(len(batch))])
    assert estimate_bias(model, batch, 0) == pytest.approx(oracle, rel=1e-10)


def test_bias_invariant_to_permuting_other_members(batch):
    model = small_model(n_members=4)
    before = estimate_bias(model, batch, 0)
    perm = np.array([0, 3, 1, 2])
    model.params_ = ParamVector.from_tensors({k: v[perm] for k, v in model.params_.tensors().items()})
    assert estimate_bias(model, batch, 0) == pytest.approx(before, rel=1e-12)


def test_shift_bias_estimate_validation(batch):
    est = estimate_shift_bias(small_model().snapshot(), small_model(seed=1), batch)
    assert est.objective == est.shift + est.bias
    with pytest.raises(NonFiniteError):
        ShiftBiasEstimate(-1.0, 0.0)
    with pytest.raises(NonFiniteError):
        ShiftBiasEstimate(np.nan, 0.0)
    with pytest.raises(UsageError):
        estimate_bias(small_model(), np.zeros((0, 3)))
    with pytest.raises(UsageError):
        estimate_bias(small_model(n_members=1, n_elites=1), batch)


def test_fine_tune_zero_steps_is_a_no_op(batch):
    model = small_model()
    snap = small_model(seed=1).snapshot()
    values = model.params_.values.copy()
    res = fine_tune(snap, model, batch, steps=0)
    assert np.array_equal(model.params_.values, values)
    assert res.before == res.after and res.objective_delta == 0.0


def test_fine_tune_variant_none_is_a_no_op(batch):
    model = small_model()
    values = model.params_.values.copy()
    res = fine_tune(small_model(seed=1).snapshot(), model, batch, steps=5, variant="none")
    assert np.array_equal(model.params_.values, values) and res.steps == 0


def test_fine_tune_starts_with_zero_shift_from_backup(batch):
    model = small_model()
    res = fine_tune(model.snapshot(), model, batch, steps=3, lr=1e-3)
    assert res.before.shift == 0.0
    assert res.after.shift > 0.0


def test_fine_tune_near_converged_model_does_not_move(batch):
    model = shared_members(small_model())
    res = fine_tune(model.snapshot(), model, batch, steps=10, lr=1e-4)
    assert res.grad_norm < 1e-8
    assert abs(res.objective_delta) < 1e-12


def test_fine_tune_descends_on_a_frozen_batch():
    decreased = 0
    for trial in range(100):
        rng = np.random.default_rng(trial)
        model = small_model(seed=trial, hidden=(8,))
        snap = model.snapshot()
        model.params_ = model.params_.with_values(model.params_.values + 0.05 * rng.normal(size=len(model.params_)))
        batch = rng.normal(size=(32, 3))
        res = fine_tune(snap, model, batch, steps=10, lr=1e-4, batch_size=32, seed=trial)
        decreased += res.after.objective <= res.before.objective
    assert decreased >= 95


def test_fine_tune_never_mutates_snapshot(batch):
    model = small_model()
    snap = small_model(seed=3).snapshot()
    digest = snap.checksum()
    fine_tune(snap, model, batch, steps=5, lr=1e-3)
    assert snap.checksum() == digest
    with pytest.raises(ValueError):
        snap.params_.values[0] = 1.0


def test_fine_tune_only_elites_moves_only_elites(batch):
    model = small_model(n_members=4, n_elites=2)
    values = model.params_.values.copy()
    fine_tune(small_model(seed=4).snapshot(), model, batch, steps=3, lr=1e-3, members="elites")
    moved = model.params_.values != values
    others = model.member_mask([b for b in range(4) if b not in model.elites_]).astype(bool)
    assert moved.any() and not moved[others].any()


def test_phase2_gradient_matches_finite_differences(batch):
    model = small_model(n_members=3, hidden=(6,))
    snap = small_model(n_members=3, seed=9, hidden=(6,)).snapshot()
    value, grad = phase2_gradient(snap, model, batch[:8])
    rng = np.random.default_rng(0)
    for i in rng.choice(len(model.params_), 10, replace=False):
        def f(v):
            p = model.params_.values.copy()
            p[i] = v
            return phase2_gradient(snap, model, batch[:8], params=model.params_.with_values(p))[0]
        x0, h = model.params_.values[i], 1e-6
        fd = (f(x0 + h) - f(x0 - h)) / (2 * h)
        assert grad.values[i] == pytest.approx(fd, rel=1e-4, abs=1e-8)


def test_fine_tune_rejects_bad_arguments(batch):
    model = small_model()
    snap = model.snapshot()
    with pytest.raises(UsageError):
        fine_tune(snap, model, batch, variant="both")
    with pytest.raises(UsageError):
        fine_tune(snap, model, batch, lr=0.0)


def copy_model(state_dim=2, action_dim=1):
    """Model whose mean head is exactly zero: predicts s' = s and r = 0."""
    model = EnsembleDynamics(state_dim, action_dim, n_members=2, n_elites=1, hidden=(4,), random_state=0).initialize()
    return set_tensors(model, l1_W=np.zeros_like, l1_b=np.zeros_like)


def test_rollout_with_copying_model():
    model = copy_model()
    s = np.array([[0.1, 0.2], [0.3, -0.4]])
    out = branch_rollout(model, lambda x, rng: np.full((len(x), 1), 0.5), s, horizon=1, deterministic=True)
    assert np.array_equal(out["s"], s) and np.array_equal(out["s_next"], s)
    assert np.array_equal(out["r"], np.zeros(2)) and np.array_equal(out["a"], np.full((2, 1), 0.5))


def test_rollout_fixed_seed_is_reproducible(rng):
    model = small_model()
    s = rng.normal(size=(20, 2))

    def policy(x, g):
        return g.uniform(-1, 1, (len(x), 1))

    a = branch_rollout(model, policy, s, horizon=3, seed=7)
    b = branch_rollout(model, policy, s, horizon=3, seed=7)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    assert len(a["s"]) == 60


def test_rollout_member_choice_with_single_elite(rng):
    model = small_model(n_members=3, n_elites=1)
    s = rng.normal(size=(10, 2))
    zero = lambda x, g: np.zeros((len(x), 1))  # noqa: E731
    outs = [branch_rollout(model, zero, s, 1, seed=k, deterministic=True)["s_next"] for k in range(3)]
    assert all(np.array_equal(outs[0], o) for o in outs)
    mu, _ = model.predict_dist(np.c_[s, np.zeros((10, 1))])
    assert np.allclose(outs[0], s + mu[model.elites_[0], :, :2])


def test_rollout_stops_terminated_trajectories():
    model = copy_model()
    s = np.array([[0.0, 0.0], [5.0, 0.0]])
    out = branch_rollout(model, lambda x, g: np.zeros((len(x), 1)), s, horizon=4, deterministic=True,
                         termination_fn=lambda x: np.abs(x[:, 0]) > 1.0)
    assert len(out["s"]) == 2 + 3 and out["done"].sum() == 1
    with pytest.raises(UsageError):
        branch_rollout(model, lambda x, g: x[:, :1], s, horizon=0)
