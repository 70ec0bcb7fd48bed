# bandit: skip=B101
import logging
import math
import time

import numpy as np
import pytest
import torch
from filterpy.kalman import KalmanFilter

from vsex.camera import CameraConfig, measure_clean
from vsex.datasets import SequenceDataset, generate, load, save
from vsex.errors import ConfigError, ContractError, TrainingInstabilityError
from vsex.evalkit import nmse_db
from vsex.lorenz import LorenzConfig
from vsex.mathcore import VARIANCE_FLOOR, RngStream, gaussian_logpdf
from vsex.neuralnet import GruStack, load_checkpoint
from vsex.particle_filter import PfConfig, pf_run_batch
from vsex.vse import (
    TrainConfig,
    VseModel,
    camera_measure,
    elbo,
    infer,
    load_model,
    mean_elbo,
    posterior_sequence,
    prior_sequence,
    save_model,
    split_indices,
    train,
)

SMALL = dict(hidden_dim=8, head_dim=8, samples=2, batch_size=4)


def double(x):
    return 2.0 * x


def small_model(seed=0, input_dim=64, camera=None):
    camera = camera or CameraConfig()
    config = TrainConfig(seed=seed, **SMALL)
    return VseModel.build(config, input_dim, 1.0, camera=camera)


@pytest.fixture(scope="module")
def tiny_data():
    return generate(12, 20, 10.0, LorenzConfig(), CameraConfig(), seed=0)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(samples=0)
    with pytest.raises(ConfigError):
        TrainConfig(state_offset=(0.0, 1.0))
    with pytest.raises(ConfigError):
        TrainConfig(val_fraction=1.0)


def test_model_needs_measurement():
    with pytest.raises(ConfigError):
        VseModel.build(TrainConfig(**SMALL), 64, 1.0)


def test_prior_first_belief_ignores_measurements():
    model = small_model()
    Y = np.random.default_rng(0).uniform(0, 10, size=(3, 6, 64))
    with torch.no_grad():
        prior = prior_sequence(model.prior_net, Y)
    for k in (1, 2):
        assert torch.equal(prior.mean[k, 0], prior.mean[0, 0])  # nosec B101
        assert torch.equal(  # nosec B101
            prior.var_diag[k, 0], prior.var_diag[0, 0]
        )


def test_prior_ignores_last_measurement():
    model = small_model()
    y = np.random.default_rng(1).uniform(0, 10, size=(6, 64))
    changed = y.copy()
    changed[-1] += 5.0
    with torch.no_grad():
        a = prior_sequence(model.prior_net, y)
        b = prior_sequence(model.prior_net, changed)
    assert torch.equal(a.mean, b.mean)  # nosec B101
    assert torch.equal(a.var_diag, b.var_diag)  # nosec B101


def test_posterior_prefix_property():
    model = small_model()
    y = np.random.default_rng(2).uniform(0, 10, size=(9, 64))
    with torch.no_grad():
        full = posterior_sequence(model.post_net, y)
        prefix = posterior_sequence(model.post_net, y[:4])
    assert torch.equal(full.mean[:4], prefix.mean)  # nosec B101
    assert torch.equal(full.var_diag[:4], prefix.var_diag)  # nosec B101


def test_zero_weight_beliefs():
    prior = GruStack(64, 3, hidden_dim=4, head_dim=4)
    post = GruStack(64, 3, hidden_dim=4, head_dim=4)
    model = VseModel(prior, post, camera_measure(CameraConfig()), 1.0)
    y = np.random.default_rng(3).uniform(0, 10, size=(5, 64))
    expected = math.log(2.0) + VARIANCE_FLOOR
    with torch.no_grad():
        for belief in (
            prior_sequence(model.prior_net, y),
            posterior_sequence(model.post_net, y),
        ):
            assert torch.all(belief.mean == 0)  # nosec B101
            np.testing.assert_allclose(
                belief.var_diag.numpy(), expected, rtol=1e-12
            )


def test_model_rejects_mismatched_networks():
    with pytest.raises(ContractError):
        VseModel(
            GruStack(64, 3, hidden_dim=2, head_dim=2),
            GruStack(32, 3, hidden_dim=2, head_dim=2),
            double,
            1.0,
        )


def test_elbo_report_identity(tiny_data):
    model = small_model()
    report = elbo(model, tiny_data.measurements[0], RngStream(0))
    assert report.reconstruction.shape == (20,)  # nosec B101
    assert report.total == float(  # nosec B101
        np.sum(report.reconstruction - report.kl)
    )
    assert np.all(report.kl >= 0.0)  # nosec B101


def test_elbo_is_deterministic_per_stream(tiny_data):
    model = small_model()
    y = tiny_data.measurements[1]
    a = elbo(model, y, RngStream(4, 1))
    b = elbo(model, y, RngStream(4, 1))
    np.testing.assert_array_equal(a.reconstruction, b.reconstruction)


def test_collapsed_posterior_reconstruction():
    camera = CameraConfig()
    offset = (0.0, 0.0, 25.0)
    prior = GruStack(64, 3, hidden_dim=4, head_dim=4, state_offset=offset)
    post = GruStack(64, 3, hidden_dim=4, head_dim=4, state_offset=offset)
    with torch.no_grad():
        post.head.b_var.fill_(-40.0)
    mean = np.array(offset)
    y = np.tile(measure_clean(mean, camera), (4, 1))
    reference = float(gaussian_logpdf(y[0], measure_clean(mean, camera), 1.0))
    values = []
    for samples in (1, 10):
        model = VseModel(prior, post, camera_measure(camera), 1.0, samples)
        for seed in range(5):
            values.append(elbo(model, y, RngStream(seed)).reconstruction)
    values = np.concatenate(values)
    assert np.max(values) - np.min(values) < 1e-3  # nosec B101
    assert np.all(np.abs(values - reference) < 1e-3)  # nosec B101


def simulate_toy(a, q, r, p0, T, rng):
    x = rng.normal(0.0, math.sqrt(p0))
    ys = []
    for _ in range(T):
        x = a * x + rng.normal(0.0, math.sqrt(q))
        ys.append(2.0 * x + rng.normal(0.0, math.sqrt(r)))
    return np.array(ys)[:, None]


def kalman_log_evidence(y, a, q, r, p0):
    kf = KalmanFilter(dim_x=1, dim_z=1)
    kf.x = np.zeros((1, 1))
    kf.P = np.array([[p0]])
    kf.F = np.array([[a]])
    kf.Q = np.array([[q]])
    kf.H = np.array([[2.0]])
    kf.R = np.array([[r]])
    total = 0.0
    for y_t in y:
        kf.predict()
        kf.update(y_t)
        total += kf.log_likelihood
    return total


def toy_model(seed, sigma_w2, samples=10):
    config = TrainConfig(
        state_dim=1,
        hidden_dim=8,
        head_dim=8,
        samples=samples,
        state_offset=(0.0,),
        state_scale=1.0,
        seed=seed,
    )
    return VseModel.build(config, 1, sigma_w2, measure=double)


def test_elbo_below_kalman_evidence():
    rng = np.random.default_rng(10)
    for seed in range(50):
        a = rng.uniform(0.5, 0.99)
        q = rng.uniform(0.1, 1.0)
        r = rng.uniform(0.1, 1.0)
        y = simulate_toy(a, q, r, 1.0, 40, rng)
        model = toy_model(seed, r)
        bound = elbo(model, y, RngStream(seed, 7)).total
        assert bound <= kalman_log_evidence(y, a, q, r, 1.0)  # nosec B101


def test_infer_draws_no_random_numbers(tiny_data):
    model = small_model()
    y = tiny_data.measurements[0]
    before = RngStream.total_draws
    belief, estimates = infer(model, y)
    again, _ = infer(model, y)
    assert RngStream.total_draws == before  # nosec B101
    np.testing.assert_array_equal(belief.mean, again.mean)
    np.testing.assert_array_equal(belief.var_diag, again.var_diag)
    np.testing.assert_array_equal(estimates, belief.mean)
    assert estimates.shape == (20, 3)  # nosec B101


def test_infer_width_mismatch():
    with pytest.raises(ContractError):
        infer(small_model(), np.zeros((5, 10)))


@pytest.mark.slow
def test_infer_time_is_linear_in_length():
    model = small_model()
    rng = np.random.default_rng(0)
    y_long = rng.uniform(0, 10, size=(2000, 64))
    infer(model, y_long[:100])

    def best_of(y):
        times = []
        for _ in range(3):
            started = time.perf_counter()
            infer(model, y)
            times.append(time.perf_counter() - started)
        return min(times)

    ratio = best_of(y_long) / best_of(y_long[:1000])
    assert 1.6 <= ratio <= 2.4  # nosec B101


def test_split_indices_is_seeded_partition():
    train_idx, val_idx = split_indices(20, 0.1, RngStream(0).child("split"))
    assert len(val_idx) == 2 and len(train_idx) == 18  # nosec B101
    assert set(train_idx).isdisjoint(val_idx)  # nosec B101
    again = split_indices(20, 0.1, RngStream(0).child("split"))
    np.testing.assert_array_equal(train_idx, again[0])


def test_split_indices_tiny_set_validates_on_train():
    train_idx, val_idx = split_indices(3, 0.1, RngStream(0))
    np.testing.assert_array_equal(train_idx, val_idx)


def test_train_smoke_and_wiring(tiny_data):
    config = TrainConfig(epochs=3, seed=2, **SMALL)
    result = train(tiny_data, config)
    assert [r.epoch for r in result.history] == [1, 2, 3]  # nosec B101
    assert result.initial.epoch == 0  # nosec B101
    assert all(np.isfinite(r.val_elbo) for r in result.history)  # nosec B101

    initial = VseModel.build(
        config,
        64,
        tiny_data.meta["sigma_w2"],
        camera=CameraConfig(**tiny_data.meta["camera"]),
    )
    direct = mean_elbo(
        initial,
        tiny_data.measurements[result.val_indices],
        RngStream(config.seed).child("evaluate", "validation"),
        config.batch_size,
    )
    assert result.initial.val_elbo == pytest.approx(  # nosec B101
        direct, rel=1e-12
    )


def test_train_never_reads_states(tmp_path, tiny_data):
    path = str(tmp_path / "train.vsedata")
    save(tiny_data, path)
    audited = load(path, audit=True)
    result = train(audited, TrainConfig(epochs=1, **SMALL))
    assert result.state_reads == 0  # nosec B101
    assert audited.state_reads == 0  # nosec B101


def test_train_is_deterministic(tmp_path, tiny_data):
    torch.set_num_threads(1)
    config = TrainConfig(epochs=2, seed=1, **SMALL)
    paths = [str(tmp_path / f"run{k}.vseparam") for k in range(2)]
    for path in paths:
        train(tiny_data, config, checkpoint_path=path)
    blobs = []
    for path in paths:
        with open(path, "rb") as fh:
            blobs.append(fh.read())
    assert blobs[0] == blobs[1]  # nosec B101


def test_train_resume_continues_epochs(tmp_path, tiny_data):
    path = str(tmp_path / "ckpt.vseparam")
    config = TrainConfig(epochs=2, **SMALL)
    train(tiny_data, config, checkpoint_path=path)
    resumed = train(tiny_data, config, resume=path)
    assert [r.epoch for r in resumed.history] == [3, 4]  # nosec B101
    assert resumed.initial.epoch == 2  # nosec B101


def test_train_aborts_on_non_finite_loss(tmp_path, tiny_data):
    Y = tiny_data.measurements.copy()
    Y[:, 3, 5] = np.nan
    broken = SequenceDataset(Y, meta=tiny_data.meta)
    path = str(tmp_path / "last_good.vseparam")
    with pytest.raises(TrainingInstabilityError) as info:
        train(broken, TrainConfig(epochs=2, **SMALL), checkpoint_path=path)
    assert info.value.last_good is not None  # nosec B101
    model, meta, _ = load_model(path)
    assert meta["epoch"] == 0  # nosec B101


def test_checkpoint_round_trip(tmp_path, tiny_data):
    model = small_model(seed=5)
    path = str(tmp_path / "model.vseparam")
    config = TrainConfig(seed=5, **SMALL)
    save_model(model, path, config)
    loaded, meta, _ = load_model(path)
    y = tiny_data.measurements[0]
    np.testing.assert_array_equal(infer(model, y)[1], infer(loaded, y)[1])
    assert meta["training"]["seed"] == 5  # nosec B101
    assert loaded.sigma_w2 == model.sigma_w2  # nosec B101


@pytest.mark.slow
def test_toy_training_shrinks_evidence_gap():
    rng = np.random.default_rng(20)
    a, q, r, p0 = 0.9, 0.5, 0.3, 1.0
    Y = np.stack([simulate_toy(a, q, r, p0, 50, rng) for _ in range(64)])
    evidence = np.mean([kalman_log_evidence(y, a, q, r, p0) for y in Y])
    config = TrainConfig(
        state_dim=1,
        hidden_dim=8,
        head_dim=8,
        samples=10,
        batch_size=16,
        epochs=200,
        lr=3e-3,
        val_fraction=0.0,
        early_stop_patience=0,
        state_offset=(0.0,),
        state_scale=1.0,
        seed=0,
    )
    before = toy_model(0, r)

    def gap(model):
        total = np.mean(
            [elbo(model, y, RngStream(1, i)).total for i, y in enumerate(Y)]
        )
        return evidence - total

    initial_gap = gap(before)
    result = train(SequenceDataset(Y), config, measure=double, sigma_w2=r)
    assert gap(result.model) <= 0.5 * initial_gap  # nosec B101


@pytest.mark.slow
def test_end_to_end_desk_run():
    torch.set_num_threads(1)
    lorenz, camera = LorenzConfig(), CameraConfig()
    data = generate(200, 100, 10.0, lorenz, camera, seed=1)
    config = TrainConfig(epochs=150, batch_size=32, seed=1)
    result = train(data, config)
    assert result.history[-1].val_elbo > result.history[0].val_elbo  # nosec B101

    test = generate(20, 100, 10.0, lorenz, camera, seed=99)
    estimates = np.stack([infer(result.model, y)[1] for y in test.measurements])
    vse = nmse_db(test.states, estimates).nmse_db
    assert vse <= -3.0  # nosec B101
    pf = pf_run_batch(
        test.measurements, lorenz, camera, test.meta["sigma_w2"], PfConfig()
    )
    assert nmse_db(test.states, pf).nmse_db <= vse + 0.5  # nosec B101


def test_infer_logs_with_tag(tiny_data, caplog):
    caplog.set_level(logging.DEBUG)
    infer(small_model(), tiny_data.measurements[0])
    assert any("[INFER]" in r.message for r in caplog.records)  # nosec B101


def test_rollback_keeps_optimizer_of_best_epoch(tmp_path, tiny_data):
    camera = CameraConfig()
    clean = camera_measure(camera)
    calls = []

    def failing_measure(x):
        # 4 evaluation batches up front, 4 per epoch (3 train + 1 val):
        # call 10 is the second training batch of epoch 2
        calls.append(1)
        out = clean(x)
        return out * float("nan") if len(calls) >= 10 else out

    path = str(tmp_path / "rollback.vseparam")
    with pytest.raises(TrainingInstabilityError):
        train(
            tiny_data,
            TrainConfig(epochs=3, **SMALL),
            measure=failing_measure,
            camera=camera,
            checkpoint_path=path,
        )
    tensors, meta = load_checkpoint(path)
    epoch = meta["epoch"]
    assert epoch in (0, 1)  # nosec B101
    steps = {
        float(v) for k, v in tensors.items() if k.endswith(".step")
    }
    # 11 training sequences in batches of 4 give 3 Adam steps per epoch
    assert steps == (set() if epoch == 0 else {3.0})  # nosec B101
