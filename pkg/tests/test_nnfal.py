import json
import warnings
from pathlib import Path

import numpy as np
import pytest
from hypothesis import given, strategies as st

from flexifal import stl
from flexifal.core import Box
from flexifal.dataset import ScalingParams, generate_nn_dataset, minmax_scale
from flexifal.nnfal import (Layout, Mlp, NnfalBudget, ReachabilitySpec, SpuriousSet, Surrogate, TrainConfig,
                            TrainingError, Validation, attack_loss, exclude_spurious, falsification_rate,
                            fgsm_attack, forward, load_model, nnfal_run, pgd_attack, save_model, train_mlp,
                            validate)
from flexifal.systems import get_system

from oracles import grid_argmin

REF = json.loads((Path(__file__).parent / "reference" / "mlp_square.json").read_text())


def identity_net():
    return Mlp([np.array([[1.0]])], [np.array([0.0])])


def clamped_net(level=0.5):
    # y = level - relu(-x) ... stays <= level on [0, 1]
    return Mlp([np.array([[-1.0]]), np.array([[-1.0]])], [np.array([0.0]), np.array([level])])


# ----------------------------------------------------------------- forward


def test_zero_weights_give_bias():
    net = Mlp.zeros([3, 4, 2])
    net.biases[-1][:] = [1.5, -2.0]
    assert forward(net, np.array([7.0, -1.0, 3.0])).tolist() == [1.5, -2.0]


def test_single_affine_layer():
    net = Mlp([np.array([[2.0]])], [np.array([1.0])])
    assert forward(net, np.array([3.0]))[0] == 7.0


def test_dead_relu_unit():
    net = Mlp([np.array([[1.0]]), np.array([[1.0]])], [np.array([0.0]), np.array([0.0])])
    assert forward(net, np.array([-3.0]))[0] == 0.0


def test_dimension_mismatch():
    with pytest.raises(ValueError):
        forward(identity_net(), np.array([1.0, 2.0]))


def test_zero_net_on_zero_targets_has_zero_loss():
    net = Mlp.zeros([2, 1])
    loss, _, _ = net.loss_and_grads(np.ones((5, 2)), np.zeros((5, 1)))
    assert loss == 0.0


def _ld_loss(Ws, bs, X, Y):
    # independent extended-precision forward pass; also returns the ReLU pattern
    a, pattern = X.astype(np.longdouble), []
    for i, (W, b) in enumerate(zip(Ws, bs)):
        z = a @ W.T + b
        if i < len(Ws) - 1:
            pattern.append(z > 0)
            z = np.where(z > 0, z, 0)
        a = z
    return np.mean((a - Y) ** 2), pattern


def _fd_check(net, X, Y, h=1e-6):
    """Worst relative error of backprop against central differences.

    Differences are taken in long double so cancellation does not swamp tiny
    gradients; a step that flips a ReLU straddles a kink and is retried smaller.
    """
    _, dWs, dbs = net.loss_and_grads(X, Y)
    Ws = [W.astype(np.longdouble) for W in net.weights]
    bs = [b.astype(np.longdouble) for b in net.biases]
    worst = 0.0
    for params, grads in ((Ws, dWs), (bs, dbs)):
        for p, g in zip(params, grads):
            for idx in np.ndindex(p.shape):
                old = p[idx]
                for step in (h, h * 1e-3, h * 1e-6):
                    p[idx] = old + step
                    lp, pat_p = _ld_loss(Ws, bs, X, Y)
                    p[idx] = old - step
                    lm, pat_m = _ld_loss(Ws, bs, X, Y)
                    p[idx] = old
                    if all(np.array_equal(u, v) for u, v in zip(pat_p, pat_m)):
                        break
                fd = float((lp - lm) / (2 * step))
                worst = max(worst, abs(fd - g[idx]) / max(abs(fd), abs(g[idx]), 1e-6))
    return worst


def random_small_net(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    widths = [int(rng.integers(1, 5))] + [int(rng.integers(1, 33)) for _ in range(depth - 1)] + \
        [int(rng.integers(1, 4))]
    net = Mlp.init(widths, seed)
    X = rng.normal(size=(8, widths[0]))
    Y = rng.normal(size=(8, widths[-1]))
    return net, X, Y


@given(st.integers(0, 2**31))
def test_backprop_matches_central_differences(seed):
    net, X, Y = random_small_net(seed)
    assert _fd_check(net, X, Y) < 1e-4


def test_input_gradient_matches_central_differences():
    rng = np.random.default_rng(2)
    net = Mlp.init([3, 8, 2], 2)
    spec = ReachabilitySpec(Box([-5] * 3, [5] * 3), [[1.0, -2.0], [0.5, 1.0]], [-10.0, -10.0])
    x = rng.normal(size=3)
    loss, g = attack_loss(net, spec, x)
    assert loss > 0
    h = 1e-6
    for i in range(3):
        e = np.zeros(3)
        e[i] = h
        fd = (attack_loss(net, spec, x + e)[0] - attack_loss(net, spec, x - e)[0]) / (2 * h)
        assert fd == pytest.approx(g[i], rel=1e-5, abs=1e-8)


# ----------------------------------------------------------------- training


def test_training_fits_square_to_reference():
    rng = np.random.default_rng(0)
    X = np.hstack([rng.uniform(0, 1, (5000, 1)), rng.uniform(0, 1, (5000, 1))])
    res = train_mlp(X, X[:, :1] ** 2, [16, 16], TrainConfig())
    assert res.mlp.widths == [2, 16, 16, 1]
    assert res.best_loss < REF["threshold"]
    assert res.best_loss == pytest.approx(REF["best_val_mse"], rel=0.5)


def test_training_is_deterministic():
    rng = np.random.default_rng(1)
    X = rng.uniform(size=(200, 2))
    Y = X.sum(axis=1, keepdims=True)
    a = train_mlp(X, Y, [8], TrainConfig(lr=1e-2, max_epochs=5, seed=3))
    b = train_mlp(X, Y, [8], TrainConfig(lr=1e-2, max_epochs=5, seed=3))
    assert all(np.array_equal(p, q) for p, q in zip(a.mlp.params(), b.mlp.params()))


def test_early_stopping_keeps_best_checkpoint():
    rng = np.random.default_rng(4)
    X = rng.uniform(size=(40, 1))
    Y = rng.normal(size=(40, 1))  # pure noise: validation loss stops improving quickly
    res = train_mlp(X, Y, [32], TrainConfig(lr=0.05, max_epochs=200, patience=5, seed=0))
    last = res.history[-1]["epoch"]
    assert last < 200 and last - res.best_epoch == 5
    assert res.best_loss == min(h["loss"] for h in res.history)


def test_without_early_stopping_runs_all_epochs():
    rng = np.random.default_rng(4)
    X = rng.uniform(size=(40, 1))
    res = train_mlp(X, X * 2, [4], TrainConfig(lr=1e-2, max_epochs=12, early_stopping=False))
    assert res.history[-1]["epoch"] == 12


def test_nan_loss_aborts():
    X = np.ones((10, 1))
    with pytest.raises(TrainingError):
        train_mlp(X, np.full((10, 1), np.nan), [2], TrainConfig(max_epochs=1))


def test_empty_dataset_rejected():
    with pytest.raises(TrainingError):
        train_mlp(np.zeros((0, 1)), np.zeros((0, 1)), [2])


def test_invalid_config():
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)


def test_model_file_round_trip(tmp_path):
    net = Mlp.init([3, 5, 2], 7)
    sur = Surrogate(net, ScalingParams([0, 1, 2], [1, 3, 2]), {"system": "x"})
    save_model(tmp_path / "m.bin", sur)
    back = load_model(tmp_path / "m.bin")
    assert all(np.array_equal(p, q) for p, q in zip(net.params(), back.mlp.params()))
    assert back.meta == {"system": "x"} and np.array_equal(back.scaling.maxs, sur.scaling.maxs)
    raw = (tmp_path / "m.bin").read_bytes()
    assert raw[:4] == b"FFNN"


# ------------------------------------------------------------------ attacks


UNIT = Box([0.0], [1.0])


def above(level):
    return ReachabilitySpec(UNIT, [[-1.0]], [-level])  # -y <= -level  <=>  y >= level


def test_pgd_identity_net_finds_point_quickly():
    res = pgd_attack(identity_net(), above(0.9), iters=50, step=0.05, restarts=1, seed=0)
    assert res.found and res.candidate[0] >= 0.9 and res.iterations <= 20


def test_fgsm_identity_net():
    res = fgsm_attack(identity_net(), above(0.9), eps=1.0, seed=0)
    assert res.found and res.candidate[0] >= 0.9


def test_unreachable_is_not_found():
    net = clamped_net(0.5)
    assert not pgd_attack(net, above(0.9), iters=50, restarts=3).found
    assert not fgsm_attack(net, above(0.9), eps=1.0).found


@given(st.integers(0, 2**31), st.floats(0.0, 0.2))
def test_attack_soundness(seed, delta):
    rng = np.random.default_rng(seed)
    net = Mlp.init([2, 8, 1], seed)
    spec = ReachabilitySpec(Box([0, 0], [1, 1]), [[-1.0]], [-float(rng.uniform(-0.5, 0.5))])
    psi = SpuriousSet()
    for c in rng.uniform(size=(3, 2)):
        psi = exclude_spurious(psi, c, delta)
    for res in (pgd_attack(net, spec, psi, iters=30, step=0.05, restarts=3, seed=seed),
                fgsm_attack(net, spec, psi, eps=0.3, seed=seed)):
        if res.found:
            x = res.candidate
            assert spec.I.contains(x)
            assert attack_loss(net, spec, x)[0] == 0.0
            assert not psi.contains(x)


def test_exclusion_moves_the_attack():
    spec = above(0.9)
    first = pgd_attack(identity_net(), spec, iters=50, step=0.05, restarts=1, seed=1)
    psi = exclude_spurious(SpuriousSet(), first.candidate, 1e-3)
    second = pgd_attack(identity_net(), spec, psi, iters=50, step=0.05, restarts=1, seed=1)
    assert not second.found or np.max(np.abs(second.candidate - first.candidate)) > 1e-3


def test_zero_radius_is_point_exclusion():
    psi = exclude_spurious(SpuriousSet(), [0.5], 0.0)
    assert psi.contains([0.5]) and not psi.contains([np.nextafter(0.5, 1.0)])


def test_margin_demands_strict_entry():
    res = pgd_attack(identity_net(), above(0.9), iters=100, step=0.01, restarts=1, seed=0, margin=0.05)
    assert res.found and res.candidate[0] >= 0.95


# ------------------------------------------------------ validation and loop


def const_surrogate(seed=0):
    """Surrogate of x' = 0 (output = x0 at every t), trained briefly on generated data."""
    s = get_system("const1d")
    ds = generate_nn_dataset(s, UNIT, Box([], []), 1, 1.0, 0.1, 200, seed)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        Xs, sc = minmax_scale(ds.inputs)
    res = train_mlp(Xs, ds.outputs, [16, 16], TrainConfig(lr=1e-2, max_epochs=40, seed=seed))
    return s, Surrogate(res.mlp, sc, ds.meta)


@pytest.fixture(scope="module")
def const_setup():
    return const_surrogate()


LAYOUT = Layout(1, 1, 1.0, 0.1)
I_CONST = Box([0.0, 0.0], [1.0, 1.0])  # (x0, t)


def test_surrogate_candidate_in_true_violating_set(const_setup):
    s, sur = const_setup
    spec = ReachabilitySpec.from_output_box(I_CONST, [0.1], [np.inf])
    res = nnfal_run(s, sur, spec, LAYOUT, NnfalBudget(max_attacks=5), seed=0)
    assert res.success and res.refinements == 0
    # oracle: grid over I at 1e-3; violating set is x0 >= 0.1 for every t
    truth = grid_argmin(lambda x: x[0] >= 0.1, [0.0], [1.0], 1e-3)
    assert truth.min() == pytest.approx(0.1)
    assert res.candidate[0] >= 0.1
    phi = stl.parse("G[0,1] x < 0.1")
    assert stl.robustness(phi, res.counterexample.trajectory) < 0


def test_validate_real_and_spurious():
    s = get_system("const1d")
    spec = ReachabilitySpec.from_output_box(I_CONST, [0.5], [np.inf])
    assert validate(s, [0.7, 0.33], spec, LAYOUT).real
    v = validate(s, [0.2, 0.33], spec, LAYOUT)
    assert not v.real and v.index == 3  # t = 0.33 snaps to sample 3
    assert validate(s, [0.7, 0.0], stl.parse("G[0,1] x < 0.5"), LAYOUT).real


def test_validate_any_mode():
    s = get_system("integrator")
    layout = Layout(1, 1, 1.0, 0.1)
    spec = ReachabilitySpec(Box([0, -1, 0], [1, 1, 1]), [[-1.0]], [-0.9])
    # x(t) = 0.5 + 0.5 t reaches 0.9 at t = 0.8, not at t = 0
    assert not validate(s, [0.5, 0.5, 0.0], spec, layout, mode="at_time").real
    v = validate(s, [0.5, 0.5, 0.0], spec, layout, mode="any")
    assert v.real and v.index == int(np.flatnonzero(v.trajectory.states[:, 0] >= 0.9)[0]) in (8, 9)


def test_rigged_validator_three_spurious_rounds(const_setup):
    s, sur = const_setup
    spec = ReachabilitySpec.from_output_box(I_CONST, [0.1], [np.inf])
    seen = []

    def rigged(cand):
        seen.append(np.array(cand))
        real = len(seen) > 3
        return Validation(real, None, 0, -1.0 if real else 1.0, "")

    delta = 0.05
    res = nnfal_run(s, sur, spec, LAYOUT, NnfalBudget(max_attacks=20), seed=2, delta=delta, validator=rigged)
    assert res.success and res.refinements == 3 and len(res.psi) == 3
    centers = np.array(res.psi.centers)
    # each stored center lies outside the balls excluded before it, so no ball holds another's center
    for i in range(3):
        for j in range(i + 1, 3):
            assert np.max(np.abs(centers[i] - centers[j])) > delta
    fourth = sur.scaling.transform(seen[3])
    assert all(np.max(np.abs(fourth - c)) > delta for c in centers)


def test_unreachable_fails_at_budget(const_setup):
    s, sur = const_setup
    spec = ReachabilitySpec.from_output_box(I_CONST, [5.0], [np.inf])
    res = nnfal_run(s, sur, spec, LAYOUT, NnfalBudget(max_attacks=4), attack_kwargs={"iters": 30, "restarts": 2})
    assert not res.success and res.counterexample is None and res.attacks == 4
    assert all(e["event"] == "not_found" for e in res.events)


def test_loop_is_deterministic(const_setup):
    s, sur = const_setup
    spec = ReachabilitySpec.from_output_box(I_CONST, [0.1], [np.inf])
    a = nnfal_run(s, sur, spec, LAYOUT, seed=5).to_json()
    b = nnfal_run(s, sur, spec, LAYOUT, seed=5).to_json()
    assert a == b


def test_unscaled_candidates_round_trip(const_setup):
    s, sur = const_setup
    spec = ReachabilitySpec.from_output_box(I_CONST, [0.1], [np.inf])
    res = nnfal_run(s, sur, spec, LAYOUT, seed=1)
    scaled = np.array(res.events[-1]["scaled"])
    np.testing.assert_allclose(sur.scaling.transform(res.candidate), scaled, atol=1e-12)


def test_falsification_rate_counts():
    assert falsification_rate(lambda seed: True) == 10
    assert falsification_rate(lambda seed: False) == 0
    assert falsification_rate(lambda seed: seed % 2 == 0, runs=10) == 5
