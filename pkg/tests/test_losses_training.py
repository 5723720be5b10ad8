import numpy as np
import pytest

from copse import geometry as geo
from copse import synth
from copse.exceptions import EmptyDataset, ShapeMismatch, TrainingDiverged
from copse.losses import LossBreakdown, loss_cen, loss_def, loss_size, loss_sym, symmetry_orbit
from copse.model import ModelConfig, PoseNetwork
from copse.nn import Tensor
from copse.training import (
    TrainConfig,
    compute_losses,
    default_gradcheck,
    gradcheck_data,
    prepare_samples,
    train,
)

AXIS_Y = geo.SymmetrySpec("rotational", np.array([0.0, 1.0, 0.0]))
MIRROR = geo.SymmetrySpec("reflectional", np.array([1.0, 0.0, 0.0]))


def naive_point_l1(a, b):
    total = 0.0
    for i in range(len(a)):
        total += sum(abs(a[i][c] - b[i][c]) for c in range(3))
    return total / len(a)


# -- losses --------------------------------------------------------------------------


def test_loss_def_examples(rng):
    K = rng.normal(size=(36, 3))
    assert loss_def(K, K).item() == 0.0
    assert loss_def(K + [0.1, 0, 0], K).item() == pytest.approx(0.1, abs=1e-12)


def test_loss_def_orbit_members_are_free(rng):
    K = rng.normal(size=(36, 3))
    for j in range(12):
        member = K @ geo.axis_angle_matrix(AXIS_Y.direction, 2 * np.pi * j / 12).T
        assert loss_def(member, K, AXIS_Y).item() <= 1e-12
    # without the symmetry the same prediction is penalised
    assert loss_def(K @ geo.axis_angle_matrix([0, 1, 0], 2 * np.pi / 12).T, K, MIRROR).item() > 0.1


def test_loss_def_orbit_in_rotated_frame(rng):
    K_c = rng.normal(size=(36, 3))
    R = geo.axis_angle_matrix(rng.normal(size=3), 1.1)
    K = K_c @ R.T
    spun = K_c @ geo.axis_angle_matrix(AXIS_Y.direction, 4 * np.pi / 12).T @ R.T
    assert loss_def(spun, K, AXIS_Y, rotation=R).item() <= 1e-12


def test_loss_def_same_for_every_orbit_member_as_target(rng):
    # spinning the target by an orbit step only relabels the orbit, so the minimum is unchanged
    K = rng.normal(size=(36, 3))
    pred = K + rng.normal(0, 0.1, K.shape)
    a = loss_def(pred, K, AXIS_Y).item()
    for j in range(1, 12):
        Q = geo.axis_angle_matrix(AXIS_Y.direction, 2 * np.pi * j / 12)
        assert abs(loss_def(pred, K @ Q.T, AXIS_Y).item() - a) <= 1e-12


def test_loss_def_is_min_over_orbit(rng):
    K = rng.normal(size=(36, 3))
    pred = rng.normal(size=(36, 3))
    ref = min(naive_point_l1(pred, member) for member in symmetry_orbit(K, AXIS_Y.direction))
    assert abs(loss_def(pred, K, AXIS_Y).item() - ref) <= 1e-12


def test_loss_sym_examples(rng):
    P = rng.normal(size=(50, 3))
    assert loss_sym(P, P).item() == 0.0
    assert loss_sym(P + [0, 0.2, 0], P).item() == pytest.approx(0.2, abs=1e-12)
    Q = rng.normal(size=(50, 3))
    assert abs(loss_sym(P, Q).item() - naive_point_l1(P, Q)) <= 1e-12


def test_loss_cen_and_size(rng):
    V, W = rng.normal(size=(80, 3)), rng.normal(size=(80, 3))
    assert loss_cen(V, V).item() == 0.0
    assert abs(loss_cen(V, W).item() - naive_point_l1(V, W)) <= 1e-12
    s = np.array([0.3, 0.5, 0.4])
    assert loss_size(s + 0.1, s).item() == pytest.approx(0.3, abs=1e-12)
    assert abs(loss_size(s[None], W[:1]).item() - naive_point_l1(s[None], W[:1])) <= 1e-12


def test_loss_shape_mismatch(rng):
    with pytest.raises(ShapeMismatch):
        loss_sym(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)))
    with pytest.raises(ShapeMismatch):
        loss_def(rng.normal(size=(5, 3)), rng.normal(size=(6, 3)), AXIS_Y)


def test_breakdown_identity():
    b = LossBreakdown(0.1, 0.2, 0.3, 0.4)
    assert abs(b.L_total - 1.0) <= 1e-12
    assert b.to_dict()["L_total"] == b.L_total


# -- training ------------------------------------------------------------------------


@pytest.fixture(scope="module")
def small_data():
    return gradcheck_data(n_samples=4, n_points=64, categories=("cyl", "box", "mug", "bowl"))


def small_net(seed=0, **kw):
    return PoseNetwork(ModelConfig(n_points=64, encoder_widths=(16, 32), decoder_widths=(32, 16), **kw),
                       seed=seed)


def test_train_config_validation():
    TrainConfig(warmup_epochs=0)
    for bad in ({"epochs": 0}, {"batch_size": 0}, {"lr": 0.0}, {"warmup_epochs": 200},
                {"lr_decay": 1.5}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_logged_breakdown_identity(small_data):
    hist = train(small_net(), small_data, TrainConfig(epochs=3, batch_size=3, warmup_epochs=1))
    assert [h["epoch"] for h in hist] == [0, 1, 2]
    for h in hist:
        assert set(h) == {"epoch", "lr", "L_def", "L_sym", "L_cen", "L_size", "L_total", "wall_ms"}
        assert abs(h["L_def"] + h["L_sym"] + h["L_cen"] + h["L_size"] - h["L_total"]) <= 1e-12


def test_lr_in_log_follows_schedule(small_data):
    hist = train(small_net(), small_data, TrainConfig(epochs=9, batch_size=4, warmup_epochs=0))
    assert [h["lr"] for h in hist[3:5]] == [0.0004, 0.0004 * 0.75]
    assert hist[8]["lr"] == pytest.approx(0.000225)


def test_training_is_deterministic(small_data):
    nets = [small_net(seed=7), small_net(seed=7)]
    for n in nets:
        train(n, small_data, TrainConfig(epochs=3, batch_size=3, warmup_epochs=1, seed=5))
    for k, v in nets[0].state_dict().items():
        assert np.array_equal(v, nets[1].state_dict()[k])


def test_single_sample_overfit(templates):
    smp = synth.generate_instance(templates["mug"], 11)
    data = prepare_samples([smp], templates, 1024)
    # one sample per epoch: the per-4-epoch decay would freeze learning after a few dozen steps
    hist = train(PoseNetwork(ModelConfig(), seed=0), data, TrainConfig(epochs=200, lr_decay=1.0))
    assert hist[-1]["L_total"] < 0.1 * hist[0]["L_total"]


def test_warmup_ignores_predicted_symmetric_cloud(small_data):
    net = small_net()
    _, forced, out = compute_losses(net, small_data, teacher_forcing=True)
    # swap in a network whose symmetry decoder outputs garbage
    garbage = small_net()
    garbage.load_state_dict(net.state_dict())
    for p in garbage.symmetry_decoder.parameters():
        p.data = p.data * 50.0 + 3.0
    _, forced_garbage, out_g = compute_losses(garbage, small_data, teacher_forcing=True)
    assert forced_garbage.L_cen == forced.L_cen
    assert forced_garbage.L_size == forced.L_size
    assert forced_garbage.L_sym != forced.L_sym
    _, free_garbage, _ = compute_losses(garbage, small_data, teacher_forcing=False)
    assert free_garbage.L_cen != forced.L_cen


def test_warmup_still_trains_symmetry_decoder(small_data):
    net = small_net()
    net.zero_grad()
    total, _, _ = compute_losses(net, small_data, teacher_forcing=True)
    total.backward()
    assert any(np.abs(p.grad).sum() > 0 for p in net.symmetry_decoder.parameters())


def test_empty_dataset():
    with pytest.raises(EmptyDataset):
        train(small_net(), None)
    with pytest.raises(EmptyDataset):
        prepare_samples([], {})


def test_prepare_rejects_wrong_point_count(templates):
    smp = synth.generate_instance(templates["cyl"], 1, n_points=128)
    with pytest.raises(ShapeMismatch):
        prepare_samples([smp], templates, 64)


def test_divergence_guard(small_data):
    net = small_net()
    net.size_head.layers[0].weight.data[0, 0] = np.inf
    with pytest.raises(TrainingDiverged), np.errstate(invalid="ignore", over="ignore"):
        train(net, small_data, TrainConfig(epochs=1, warmup_epochs=0))


@pytest.mark.parametrize("center_mode", ["vote", "regress"])
def test_gradient_check_full_graph(center_mode):
    rows = default_gradcheck(seed=0, center_mode=center_mode)
    assert len(rows) == len(small_net(center_mode=center_mode).parameters())
    worst = max(err for _, _, err in rows)
    assert worst <= 1e-4


def test_gradient_check_teacher_forced():
    # with seed 0 the forced graph has an offset-head pre-activation at 3e-6, so a
    # 1e-5 step crosses the ReLU kink; seed 1 keeps every pre-activation clear of h
    from copse.training import GRADCHECK_WIDTHS, gradient_check

    net = PoseNetwork(ModelConfig(n_points=64, **GRADCHECK_WIDTHS), seed=1)
    rows = gradient_check(net, gradcheck_data(seed=1), h=1e-5, teacher_forcing=True)
    assert max(err for _, _, err in rows) <= 1e-4


def test_tensor_inputs_accepted(rng):
    assert loss_sym(Tensor(rng.normal(size=(4, 3))), rng.normal(size=(4, 3))).item() > 0
