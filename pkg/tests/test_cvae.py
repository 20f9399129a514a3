import numpy as np
import pytest
import torch

from dlow_lab.cvae import (
    CVAE,
    CvaeArch,
    CvaeTrainConfig,
    GaussianPosterior,
    elbo_loss,
    gaussian_kl,
    load_cvae,
    reconstruction_energy,
    reparameterize,
    sample_random,
    save_cvae,
    train_cvae,
)
from dlow_lab.errors import ConfigError, TrainingFault
from dlow_lab.metrics import ModeOracle, apd

from conftest import finite_difference_error


def _model(cell="mlp", **kw):
    torch.manual_seed(0)
    return CVAE(CvaeArch(H=3, T=5, V=4, n_z=3, hidden=16, cell=cell, **kw))


@pytest.mark.parametrize("cell", ["mlp", "gru"])
def test_encode_decode_deterministic_and_shaped(cell):
    m = _model(cell)
    x, c = torch.randn(7, 5, 4), torch.randn(7, 3, 4)
    p1, p2 = m.encode(x, c), m.encode(x, c)
    assert torch.equal(p1.mu, p2.mu) and torch.equal(p1.sigma, p2.sigma)
    z = torch.randn(7, 3)
    assert torch.equal(m.decode(z, c), m.decode(z, c))
    assert m.decode(z, c).shape == (7, 5, 4)
    assert m.decode(torch.randn(7, 6, 3), c).shape == (7, 6, 5, 4)


def test_sigma_strictly_positive():
    m = _model()
    post = m.encode(torch.randn(1000, 5, 4) * 10, torch.randn(1000, 3, 4) * 10)
    assert torch.all(post.sigma > 0) and torch.all(torch.isfinite(post.sigma))


def test_zero_output_layer_gives_zero_mean():
    m = _model()
    with torch.no_grad():
        m.enc_out.weight.zero_()
        m.enc_out.bias.zero_()
    post = m.encode(torch.randn(10, 5, 4), torch.randn(10, 3, 4))
    assert torch.all(post.mu == 0)
    assert torch.allclose(post.sigma, torch.ones_like(post.sigma))


@pytest.mark.parametrize(
    "x_shape, c_shape", [((2, 4, 4), (2, 3, 4)), ((2, 5, 3), (2, 3, 4)), ((2, 5, 4), (2, 2, 4))]
)
def test_shape_mismatch_is_config_error(x_shape, c_shape):
    m = _model()
    with pytest.raises(ConfigError):
        m.encode(torch.randn(x_shape), torch.randn(c_shape))
    with pytest.raises(ConfigError):
        m.decode(torch.randn(2, 2), torch.randn(2, 3, 4))


def test_kl_zero_for_standard_normal():
    mu, sigma = torch.zeros(5, 8), torch.ones(5, 8)
    assert torch.all(gaussian_kl(mu, sigma) == 0)


def test_reconstruction_zero_when_exact():
    x = torch.randn(4, 5, 2)
    assert torch.all(reconstruction_energy(x, x.clone(), 1.0) == 0)
    assert torch.allclose(reconstruction_energy(x, x + 1.0, 0.5), torch.full((4,), 10.0))


def _mc_gaussian_kl(mu, sigma, n, rng):
    # E_q[log q(z) - log p(z)] with z ~ q, evaluated with explicit log densities
    z = mu + sigma * rng.standard_normal((n, mu.size))
    log_q = -0.5 * np.sum(((z - mu) / sigma) ** 2 + 2 * np.log(sigma) + np.log(2 * np.pi), axis=1)
    log_p = -0.5 * np.sum(z**2 + np.log(2 * np.pi), axis=1)
    return float(np.mean(log_q - log_p))


def test_closed_form_kl_matches_monte_carlo():
    rng = np.random.default_rng(0)
    for _ in range(20):
        mu = rng.normal(0, 1, 8)
        sigma = rng.uniform(0.4, 2.0, 8)
        exact = gaussian_kl(torch.from_numpy(mu), torch.from_numpy(sigma)).item()
        mc = _mc_gaussian_kl(mu, sigma, 10**6, rng)
        assert abs(mc - exact) <= 0.01 * exact


def test_reparameterization_moments():
    g = torch.Generator().manual_seed(0)
    mu = torch.tensor([1.5, -2.0, 0.3], dtype=torch.float64)
    sigma = torch.tensor([0.5, 2.0, 1.0], dtype=torch.float64)
    post = GaussianPosterior(mu.expand(10**5, 3), sigma.expand(10**5, 3))
    z = reparameterize(post, generator=g)
    assert torch.allclose(z.mean(0), mu, rtol=0.02, atol=0.02)
    assert torch.allclose(z.std(0), sigma, rtol=0.02)


@pytest.mark.parametrize("cell", ["mlp", "gru"])
def test_elbo_gradient_matches_finite_differences(cell):
    arch = CvaeArch(H=3, T=4, V=2, n_z=2, hidden=8, cell=cell)
    for point in range(10 if cell == "mlp" else 2):
        torch.manual_seed(point)
        m = CVAE(arch).double()
        x = torch.randn(3, 4, 2, dtype=torch.float64)
        c = torch.randn(3, 3, 2, dtype=torch.float64)
        noise = torch.randn(3, 2, dtype=torch.float64)
        params = list(m.parameters())
        err = finite_difference_error(lambda: elbo_loss(x, c, m, noise=noise), params)
        assert err < 1e-4


def test_elbo_refuses_frozen_model(small_cvae, small_data):
    train, _ = small_data
    with pytest.raises(ConfigError):
        elbo_loss(torch.tensor(train.futures[:2]).float(), torch.tensor(train.contexts[:2]).float(), small_cvae)


def test_training_is_deterministic_and_frozen(small_data):
    train, _ = small_data
    arch = CvaeArch(train.H, train.T, train.V, n_z=2, hidden=16)
    cfg = CvaeTrainConfig(epochs=2, samples_per_epoch=256)
    a = train_cvae(train, arch, cfg, seed=3)
    b = train_cvae(train, arch, cfg, seed=3)
    assert a.checksum() == b.checksum()
    assert a.frozen and a.frozen_checksum == a.checksum()
    assert not any(p.requires_grad for p in a.parameters())
    assert [r["epoch"] for r in a.train_log] == [0, 1]
    assert a.train_log == b.train_log


def test_divergence_raises_with_last_good_state(small_data):
    train, _ = small_data
    arch = CvaeArch(train.H, train.T, train.V, n_z=2, hidden=16)
    with pytest.raises(TrainingFault) as info:
        train_cvae(train, arch, CvaeTrainConfig(epochs=5, samples_per_epoch=256, lr=1e30), seed=0)
    state = info.value.last_good_state
    assert state is not None
    assert all(torch.all(torch.isfinite(v)) for v in state.values())


def test_gru_training_runs(small_data):
    train, _ = small_data
    arch = CvaeArch(train.H, train.T, train.V, n_z=2, hidden=8, cell="gru")
    m = train_cvae(train, arch, CvaeTrainConfig(epochs=1, samples_per_epoch=128), seed=0)
    x = sample_random(torch.tensor(train.contexts[:2]).float(), m, 3, torch.Generator().manual_seed(0))
    assert x.shape == (2, 3, train.T, train.V)


def test_sample_random(small_cvae, small_data):
    _, test = small_data
    c = torch.tensor(test.contexts[0]).float()
    a = sample_random(c, small_cvae, 6, torch.Generator().manual_seed(1))
    b = sample_random(c, small_cvae, 6, torch.Generator().manual_seed(1))
    assert a.shape == (6, test.T, test.V) and torch.equal(a, b)
    assert apd(sample_random(c, small_cvae, 1, torch.Generator()).numpy()) == 0.0


def test_trained_decoder_is_not_degenerate(small_cvae, small_data):
    _, test = small_data
    c = torch.tensor(test.contexts[:1]).float()
    z = torch.zeros(1, small_cvae.arch.n_z)
    used = []
    for d in range(small_cvae.arch.n_z):
        z2 = z.clone()
        z2[0, d] = 1.0
        used.append((small_cvae.decode(z2, c) - small_cvae.decode(z, c)).abs().max().item())
    assert max(used) > 1e-3


def test_prior_samples_land_in_mode_clusters(small_cvae, small_data):
    train, test = small_data
    oracle = ModeOracle.from_split(train)
    g = torch.Generator().manual_seed(0)
    idx = np.arange(1000) % len(test)
    c = torch.tensor(test.contexts[idx]).float()
    X = sample_random(c, small_cvae, 1, g)[:, 0].numpy()
    hits = sum(oracle.labels(X[i : i + 1], test.contexts[idx[i]])[0] >= 0 for i in range(1000))
    assert hits >= 950


def test_checkpoint_round_trip(tmp_path, small_cvae, small_data):
    _, test = small_data
    save_cvae(small_cvae, tmp_path / "cvae", seed=0, data_fingerprint="abc")
    loaded = load_cvae(tmp_path / "cvae")
    assert loaded.checksum() == small_cvae.checksum()
    assert loaded.arch == small_cvae.arch
    c = torch.tensor(test.contexts[:3]).float()
    z = torch.randn(3, small_cvae.arch.n_z)
    assert torch.equal(loaded.decode(z, c), small_cvae.decode(z, c))
