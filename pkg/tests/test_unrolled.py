import numpy as np
import pytest

from pfbs_ct.fbp import FbpOperator
from pfbs_ct.geometry import Image, ScanGeometry, Sinogram, geometry_preset
from pfbs_ct.noise import NoiseModel, make_low_dose_pair
from pfbs_ct.phantoms import EllipsePhantomSpec, generate_ellipse_phantom
from pfbs_ct.projector import Projector
from pfbs_ct.unrolled import (AdjointPreconditioner, TrainingConfig, UnrolledModel,
                              cnn_prox_step, data_fidelity_step, forward, initial_image,
                              load_checkpoint, loss_and_gradients, reconstruct, save_checkpoint,
                              train)

from harness import MICRO_GEOMETRY, MICRO_SHAPE, gradient_report, micro_problem
from oracles import dense_system_matrix


def _zero_cnns(model):
    for name, p in model.named_params().items():
        if name != "theta1" and not name.endswith("gamma"):
            p[:] = 0.0


@pytest.fixture(scope="module")
def micro_air():
    return micro_problem("air")


@pytest.fixture(scope="module")
def micro_ir():
    return micro_problem("ir")


def test_stage_inputs_grow_with_k():
    model = UnrolledModel(Projector(MICRO_GEOMETRY, MICRO_SHAPE), K=3, channels=4)
    assert [c.first.in_ch for c in model.cnns] == [1, 2, 3]
    with pytest.raises(ValueError):
        UnrolledModel(model.projector, mode="plain")


def test_step_initialisation():
    p = Projector(MICRO_GEOMETRY, MICRO_SHAPE)
    assert np.all(UnrolledModel(p, K=2, mode="air", channels=2).step_scalars == 1.0)
    ir = UnrolledModel(p, K=2, mode="ir", channels=2)
    assert ir.step_scalars[0] == pytest.approx(1.0 / p.norm_squared())


def test_data_step_with_zero_step_is_identity(micro_air):
    model, x, y = micro_air
    model.step_scalars[:] = 0.0
    try:
        assert np.array_equal(data_fidelity_step(model, 0, x[0], y[0]), x[0])
    finally:
        model.step_scalars[:] = 1.0


@pytest.mark.parametrize("mode", ["air", "ir"])
def test_data_step_at_consistent_data_is_identity(mode):
    model, x, _ = micro_problem(mode)
    y = model.projector.forward(x[0])
    np.testing.assert_allclose(data_fidelity_step(model, 1, x[0], y), x[0], atol=1e-12)


@pytest.mark.parametrize("mode", ["air", "ir"])
def test_data_step_matches_dense_composition(mode):
    model, x, y = micro_problem(mode)
    g = MICRO_GEOMETRY
    a = dense_system_matrix(g.source_to_isocenter, g.source_to_detector, g.detector_pixel_size,
                            g.n_bins, g.n_views, 16, 16, 0.4)
    r = (a @ x[0].ravel() - y[0].ravel()).reshape(y[0].shape)
    if mode == "air":
        pr = FbpOperator(g, MICRO_SHAPE).reconstruct(r)
    else:
        pr = (a.T @ r.ravel()).reshape(16, 16)
    model.step_scalars[0] = 0.37
    expect = x[0] - 0.37 * pr
    np.testing.assert_allclose(data_fidelity_step(model, 0, x[0], y[0]), expect, atol=1e-12)


def test_cnn_step_with_zero_weights_is_identity(micro_air):
    model, x, y = micro_problem("air", K=2)
    _zero_cnns(model)
    halves = [x[:1], x[1:]]
    out, _ = cnn_prox_step(model, 1, halves, update_stats=False)
    assert np.array_equal(out, x[1:])
    with pytest.raises(ValueError):
        cnn_prox_step(model, 1, halves[:1])


def test_zero_stages_reduce_to_fbp(micro_air):
    _, _, y = micro_air
    for mode in ("air", "ir"):
        model = UnrolledModel(Projector(MICRO_GEOMETRY, MICRO_SHAPE), K=0, mode=mode)
        out, trace = forward(model, y)
        assert len(trace) == 0
        assert np.array_equal(out, initial_image(model, y))
        assert np.array_equal(out[0], FbpOperator(MICRO_GEOMETRY, MICRO_SHAPE).reconstruct(y[0]))


def test_forward_is_repeatable(micro_air):
    model, _, y = micro_air
    a, _ = forward(model, y, "train", update_stats=False)
    b, _ = forward(model, y, "train", update_stats=False)
    assert np.array_equal(a, b)


def test_fresh_model_output_is_bounded_on_desk_phantoms():
    p = Projector(geometry_preset("desk_small"), (64, 64, 0.1))
    model = UnrolledModel(p, K=4, mode="air", channels=64, seed=0)
    fbp = FbpOperator.for_projector(p)
    for i in range(2):
        x = generate_ellipse_phantom(EllipsePhantomSpec(seed=0), i)
        y, _ = make_low_dose_pair(x, p, NoiseModel(5e4, 10.0, i))
        out = reconstruct(model, y).values
        assert np.all(np.isfinite(out))
        assert np.linalg.norm(out) <= 10 * np.linalg.norm(fbp.reconstruct(y.values))


def test_exact_reconstruction_gives_zero_loss_and_gradient(micro_air):
    model, _, y = micro_problem("air", K=1)
    _zero_cnns(model)
    model.step_scalars[:] = 0.0
    target = initial_image(model, y)
    loss, grads = loss_and_gradients(model, target, y, update_stats=False)
    assert loss == 0.0
    assert all(not np.any(g) for g in grads.values())


@pytest.mark.parametrize("mode", ["air", "ir"])
def test_duplicated_batch_gives_same_loss_and_gradients(mode):
    model, x, y = micro_problem(mode)
    l1, g1 = loss_and_gradients(model, x, y, update_stats=False)
    l2, g2 = loss_and_gradients(model, np.concatenate([x, x]), np.concatenate([y, y]),
                                update_stats=False)
    assert l2 == pytest.approx(l1, rel=1e-12)
    for name in g1:
        np.testing.assert_allclose(g2[name], g1[name], rtol=1e-9, atol=1e-12 * np.abs(g1[name]).max())


def test_air_code_path_with_adjoint_matches_ir_bit_for_bit():
    air, x, y = micro_problem("air")
    ir, _, _ = micro_problem("ir")
    air.preconditioner = AdjointPreconditioner(air.projector)
    air.step_scalars[:] = ir.step_scalars
    out_a, _ = forward(air, y, update_stats=False)
    out_i, _ = forward(ir, y, update_stats=False)
    assert np.array_equal(out_a, out_i)
    la, ga = loss_and_gradients(air, x, y, update_stats=False)
    li, gi = loss_and_gradients(ir, x, y, update_stats=False)
    assert la == li
    assert all(np.array_equal(ga[k], gi[k]) for k in ga)


@pytest.mark.parametrize("mode", ["air", "ir"])
def test_gradients_match_finite_differences_small(mode):
    model, x, y = micro_problem(mode, channels=4, batch=1)
    report = gradient_report(model, x, y)
    bad = {k: v for k, v in report.items() if v[0] > 1e-4 or v[1]}
    assert not bad


def test_train_with_zero_lr_keeps_weights(micro_air):
    model, x, y = micro_problem("air")
    before = {k: v.copy() for k, v in model.named_params().items()}
    train(model, x, y, TrainingConfig(epochs=1, batch_size=2, lr=0.0))
    assert all(np.array_equal(before[k], v) for k, v in model.named_params().items())


def test_training_log_is_reproducible(tmp_path):
    logs = []
    for run in range(2):
        model, x, y = micro_problem("air")
        recs = train(model, x, y, TrainingConfig(epochs=2, batch_size=1, seed=5), x, y,
                     log_path=tmp_path / f"log{run}.jsonl")
        logs.append([{k: v for k, v in r.items() if k != "wall_time"} for r in recs])
    assert logs[0] == logs[1]
    assert (tmp_path / "log0.jsonl").read_text().count("\n") == 2


def test_train_rejects_empty_data(micro_air):
    model, _, _ = micro_air
    with pytest.raises(ValueError):
        train(model, np.zeros((0, 16, 16)), np.zeros((0, 32, 24)), TrainingConfig(epochs=1))


def test_checkpoint_round_trip_and_resume(tmp_path):
    cfg = TrainingConfig(epochs=2, batch_size=1, seed=3)
    full, x, y = micro_problem("ir")
    rec_full = train(full, x, y, cfg, checkpoint_dir=tmp_path / "a")

    part, _, _ = micro_problem("ir")
    train(part, x, y, TrainingConfig(epochs=1, batch_size=1, seed=3), checkpoint_dir=tmp_path / "b")
    resumed, adam, manifest = load_checkpoint(tmp_path / "b" / "epoch_001", part.projector)
    assert manifest["epoch"] == 1 and manifest["preconditioner"] == "adjoint"
    rec = train(resumed, x, y, cfg, start_epoch=manifest["epoch"], adam=adam)
    assert rec[0]["train_loss"] == rec_full[1]["train_loss"]
    for k, v in full.named_params().items():
        assert np.array_equal(resumed.named_params()[k], v)
    for k, v in full.named_buffers().items():
        assert np.array_equal(resumed.named_buffers()[k], v)


def test_checkpoint_geometry_mismatch(tmp_path, micro_air):
    model, _, _ = micro_air
    save_checkpoint(model, tmp_path / "ck")
    other = Projector(ScanGeometry(25.0, 50.0, 0.85, 24, 30, image_fov=6.4), MICRO_SHAPE)
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "ck", other)


def test_zero_stage_checkpoint_reconstructs_fbp(tmp_path, micro_air):
    _, _, y = micro_air
    p = Projector(MICRO_GEOMETRY, MICRO_SHAPE)
    save_checkpoint(UnrolledModel(p, K=0), tmp_path / "k0")
    model, _, _ = load_checkpoint(tmp_path / "k0", p)
    out = reconstruct(model, Sinogram(y[0]))
    assert np.array_equal(out.values, FbpOperator.for_projector(p).reconstruct(y[0]))


def test_reconstruct_checks_geometry(micro_air):
    model, _, _ = micro_air
    with pytest.raises(ValueError):
        reconstruct(model, Sinogram(np.zeros((3, 3))))


def test_zero_output_model_is_pure_data_steps(micro_air):
    _, _, y = micro_air
    p = Projector(MICRO_GEOMETRY, MICRO_SHAPE)
    model = UnrolledModel(p, K=2, mode="air", channels=4, final_relu=False, zero_output=True)
    x = initial_image(model, y)
    for k in range(2):
        x = data_fidelity_step(model, k, x, y)
    out, _ = forward(model, y, update_stats=False)
    assert np.array_equal(out, x)
    # other layers keep the random stream of the default initialisation
    ref = UnrolledModel(p, K=2, mode="air", channels=4, final_relu=False)
    assert np.array_equal(model.cnns[1].first.weight, ref.cnns[1].first.weight)


def test_zero_output_needs_a_linear_output_to_learn(micro_air):
    _, x, y = micro_air
    p = Projector(MICRO_GEOMETRY, MICRO_SHAPE)
    for final_relu, expect_any in ((True, False), (False, True)):
        model = UnrolledModel(p, K=2, mode="air", channels=4, final_relu=final_relu, zero_output=True)
        _, grads = loss_and_gradients(model, x, y, update_stats=False)
        assert any(np.any(g) for k, g in grads.items() if k != "theta1") == expect_any


def test_checkpoint_keeps_zero_output_flag(tmp_path, micro_air):
    p = Projector(MICRO_GEOMETRY, MICRO_SHAPE)
    save_checkpoint(UnrolledModel(p, K=1, channels=4, final_relu=False, zero_output=True), tmp_path / "z")
    model, _, manifest = load_checkpoint(tmp_path / "z", p)
    assert model.zero_output and not model.final_relu
    assert manifest["init"]["output_conv"] == "zeros"
