# bandit: skip=B101
import math

import numpy as np
import pytest
from filterpy.kalman import KalmanFilter
from scipy.special import logsumexp

from vsex.camera import CameraConfig
from vsex.datasets import generate
from vsex.errors import ConfigError, DegenerateFilterError
from vsex.evalkit import nmse_db
from vsex.lorenz import LorenzConfig
from vsex.mathcore import RngStream, gaussian_logpdf
from vsex.particle_filter import (
    INIT_MEAN,
    INIT_STD,
    ParticleCloud,
    PfConfig,
    bootstrap_step,
    pf_init,
    pf_run,
    pf_run_batch,
    pf_step,
    systematic_resample,
)


@pytest.fixture(scope="module")
def short_data():
    return generate(3, 15, 10.0, LorenzConfig(), CameraConfig(), seed=4)


def test_config_validation():
    with pytest.raises(ConfigError):
        PfConfig(particles=0)
    with pytest.raises(ConfigError):
        PfConfig(ess_fraction=1.5)


def test_init_uniform_weights_and_moments():
    cloud = pf_init(4000, RngStream(0))
    np.testing.assert_array_equal(cloud.log_weights, -math.log(4000))
    band = 5 * INIT_STD / math.sqrt(4000)
    assert np.all(  # nosec B101
        np.abs(cloud.particles.mean(0) - INIT_MEAN) < band
    )


def test_init_deterministic():
    a = pf_init(50, RngStream(3, 1))
    b = pf_init(50, RngStream(3, 1))
    np.testing.assert_array_equal(a.particles, b.particles)


def test_resample_point_mass():
    weights = np.zeros(6)
    weights[4] = 1.0
    np.testing.assert_array_equal(
        systematic_resample(weights, 0.37), np.full(6, 4)
    )


def test_resample_uniform_is_identity():
    np.testing.assert_array_equal(
        systematic_resample(np.full(8, 1.0 / 8), 0.0), np.arange(8)
    )


def test_resample_copy_counts():
    rng = np.random.default_rng(0)
    for _ in range(200):
        weights = rng.dirichlet(np.full(25, 0.5))
        indices = systematic_resample(weights, rng.uniform())
        counts = np.bincount(indices, minlength=25)
        assert np.all(np.abs(counts - 25 * weights) <= 1.0 + 1e-9)  # nosec B101


def test_resample_preserves_mean_in_expectation():
    rng = np.random.default_rng(1)
    values = rng.normal(size=40)
    weights = rng.dirichlet(np.ones(40))
    target = weights @ values
    means = np.array(
        [
            values[systematic_resample(weights, u)].mean()
            for u in rng.uniform(size=1000)
        ]
    )
    standard_error = means.std() / math.sqrt(len(means))
    assert abs(means.mean() - target) < 5 * standard_error + 1e-12  # nosec B101


def test_step_normalises_weights(short_data):
    cloud = pf_init(300, RngStream(0).child("init"))
    stream = RngStream(0).child("steps")
    sigma_w2 = short_data.meta["sigma_w2"]
    for t, y in enumerate(short_data.measurements[0][:5]):
        cloud, estimate = pf_step(
            cloud, y, LorenzConfig(), CameraConfig(), sigma_w2, stream, t
        )
        assert abs(logsumexp(cloud.log_weights)) < 1e-12  # nosec B101
        assert estimate.shape == (3,)  # nosec B101


def test_flat_likelihood_keeps_uniform_weights(short_data):
    cloud = pf_init(500, RngStream(1))
    cloud, _ = pf_step(
        cloud,
        short_data.measurements[0][0],
        LorenzConfig(),
        CameraConfig(),
        1e12,
        RngStream(2),
    )
    assert np.max(np.abs(cloud.weights - 1.0 / 500)) < 1e-6  # nosec B101


def test_single_particle_estimate_is_propagated_particle():
    cloud = ParticleCloud(np.array([[1.0, 2.0, 20.0]]), np.zeros(1))

    def propagate(particles, stream):
        return particles + 1.0

    def log_likelihood(y, particles):
        return np.full(len(particles), -3.0)

    new, estimate = bootstrap_step(
        cloud, None, propagate, log_likelihood, RngStream(0)
    )
    np.testing.assert_array_equal(estimate, [2.0, 3.0, 21.0])
    np.testing.assert_array_equal(new.particles, [[2.0, 3.0, 21.0]])


def test_degenerate_filter():
    cloud = pf_init(10, RngStream(0))

    def log_likelihood(y, particles):
        return np.full(len(particles), -np.inf)

    with pytest.raises(DegenerateFilterError) as info:
        bootstrap_step(
            cloud, None, lambda p, s: p, log_likelihood, RngStream(0), t=7
        )
    assert info.value.step == 7  # nosec B101


def test_bootstrap_tracks_kalman_mean():
    a, q, r, p0 = 0.95, 0.2, 0.5, 1.0
    rng = np.random.default_rng(3)
    x = rng.normal(0.0, math.sqrt(p0))
    ys = []
    for _ in range(30):
        x = a * x + rng.normal(0.0, math.sqrt(q))
        ys.append(2.0 * x + rng.normal(0.0, math.sqrt(r)))

    kf = KalmanFilter(dim_x=1, dim_z=1)
    kf.x = np.zeros((1, 1))
    kf.P = np.array([[p0]])
    kf.F = np.array([[a]])
    kf.Q = np.array([[q]])
    kf.H = np.array([[2.0]])
    kf.R = np.array([[r]])

    P = 10_000
    stream = RngStream(5)
    cloud = ParticleCloud(
        math.sqrt(p0) * stream.normal((P, 1)), np.full(P, -math.log(P))
    )

    def propagate(particles, s):
        return a * particles + math.sqrt(q) * s.normal(particles.shape)

    def log_likelihood(y, particles):
        return gaussian_logpdf(np.array([y]), 2.0 * particles, np.array([r]))

    for t, y in enumerate(ys):
        kf.predict()
        kf.update(y)
        cloud, estimate = bootstrap_step(
            cloud, y, propagate, log_likelihood, stream, t=t
        )
        posterior_std = math.sqrt(kf.P[0, 0])
        assert abs(estimate[0] - kf.x[0, 0]) < 3 * posterior_std / math.sqrt(  # nosec B101
            P / 10
        )


def test_pf_run_deterministic(short_data):
    y = short_data.measurements[0]
    sigma_w2 = short_data.meta["sigma_w2"]
    runs = [
        pf_run(
            y, LorenzConfig(), CameraConfig(), sigma_w2, 50, RngStream(3)
        )
        for _ in range(2)
    ]
    np.testing.assert_array_equal(runs[0], runs[1])
    assert runs[0].shape == (15, 3)  # nosec B101


def test_pf_run_single_particle(short_data):
    y = short_data.measurements[1]
    runs = [
        pf_run(
            y,
            LorenzConfig(),
            CameraConfig(),
            short_data.meta["sigma_w2"],
            1,
            RngStream(3),
        )
        for _ in range(2)
    ]
    np.testing.assert_array_equal(runs[0], runs[1])


def test_pf_batch_independent_of_workers(short_data):
    args = (
        short_data.measurements,
        LorenzConfig(),
        CameraConfig(),
        short_data.meta["sigma_w2"],
        PfConfig(particles=40, seed=2),
    )
    serial = pf_run_batch(*args, max_workers=1)
    pooled = pf_run_batch(*args, max_workers=2)
    for a, b in zip(serial, pooled):
        np.testing.assert_array_equal(a, b)


@pytest.mark.slow
def test_pf_improves_with_smnr():
    lorenz, camera = LorenzConfig(), CameraConfig()
    results = []
    for smnr in (0.0, 10.0, 20.0):
        data = generate(20, 200, smnr, lorenz, camera, seed=0)
        estimates = pf_run_batch(
            data.measurements,
            lorenz,
            camera,
            data.meta["sigma_w2"],
            PfConfig(particles=500, seed=0),
        )
        results.append(nmse_db(data.states, estimates).nmse_db)
    assert results[0] > results[1] > results[2]  # nosec B101
    assert results[0] - results[2] >= 3.0  # nosec B101


@pytest.mark.slow
def test_pf_more_particles_not_worse():
    lorenz, camera = LorenzConfig(), CameraConfig()
    data = generate(10, 100, 0.0, lorenz, camera, seed=1)
    sigma_w2 = data.meta["sigma_w2"]
    results = {}
    for P in (100, 2000):
        estimates = [
            pf_run(y, lorenz, camera, sigma_w2, P, RngStream(0).child(i))
            for i, y in enumerate(data.measurements)
        ]
        results[P] = nmse_db(data.states, estimates).nmse_db
    assert results[2000] < results[100] + 0.2  # nosec B101
