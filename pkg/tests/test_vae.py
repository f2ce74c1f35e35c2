import numpy as np
import pytest

from oodflow import gridio, vae
from oodflow.vae import LatentPosterior, VaeArchitecture

from naive_ref import naive_decode, naive_encode


def _zero_weights(arch, max_flow=8.0):
    tensors = {k: np.zeros(s, dtype=np.float32)
               for k, s in arch.tensor_shapes().items()}
    return vae.VaeWeights(arch=arch, max_flow=max_flow, tensors=tensors)


def _rand_flow(arch, seed=0):
    rng = np.random.default_rng(seed)
    return rng.uniform(-1, 1, size=(arch.input_channels, arch.input_size,
                                    arch.input_size)).astype(np.float32)


# ---------------------------------------------------------------------------
# architecture
# ---------------------------------------------------------------------------

def test_architecture_validation():
    with pytest.raises(ValueError):
        VaeArchitecture(input_size=20)      # not divisible by 16
    with pytest.raises(ValueError):
        VaeArchitecture(latent_dim=0)
    with pytest.raises(ValueError):
        VaeArchitecture(conv_channels=(8, 16))


def test_architecture_downsampling_chain():
    arch = VaeArchitecture()
    shapes = arch.tensor_shapes()
    # channel progression 2 -> 32 -> 64 -> 128 -> 256, kernel 4
    assert shapes["enc0_w"] == (32, 2, 4, 4)
    assert shapes["enc1_w"] == (64, 32, 4, 4)
    assert shapes["enc2_w"] == (128, 64, 4, 4)
    assert shapes["enc3_w"] == (256, 128, 4, 4)
    assert arch.grid_size == 4 and arch.flat_dim == 256 * 16
    # spatial halving per layer
    w = vae.init_weights(arch, 0)
    _, _, acts = vae.encode_batch(w, _rand_flow(arch)[None])
    assert acts.shape == (1, 256, 4, 4)


# ---------------------------------------------------------------------------
# encode / decode
# ---------------------------------------------------------------------------

def test_encode_zero_weights_passes_biases(tiny_arch):
    w = _zero_weights(tiny_arch)
    w.tensors["mu_b"][:] = np.arange(tiny_arch.latent_dim)
    w.tensors["logvar_b"][:] = -1.0
    out = vae.encode(w, _rand_flow(tiny_arch))
    np.testing.assert_allclose(out.posterior.mu, np.arange(tiny_arch.latent_dim))
    np.testing.assert_allclose(out.posterior.logvar, -1.0)


def test_encode_deterministic(tiny_arch):
    w = vae.init_weights(tiny_arch, 5)
    x = np.zeros((2, 16, 16), dtype=np.float32)
    a = vae.encode(w, x)
    b = vae.encode(w, x)
    np.testing.assert_array_equal(a.posterior.mu, b.posterior.mu)
    np.testing.assert_array_equal(a.last_conv_activations, b.last_conv_activations)


def test_encode_matches_reference_forward(tiny_arch):
    w = vae.init_weights(tiny_arch, 42)
    x = _rand_flow(tiny_arch, seed=7)
    out = vae.encode(w, x)
    ref_mu, ref_logvar, ref_acts = naive_encode(w, x)
    np.testing.assert_allclose(out.posterior.mu, ref_mu, rtol=1e-4)
    np.testing.assert_allclose(out.posterior.logvar, ref_logvar, rtol=1e-4)
    np.testing.assert_allclose(out.last_conv_activations, ref_acts,
                               rtol=1e-4, atol=1e-6)


def test_decode_zero_weights_zero_output(tiny_arch):
    w = _zero_weights(tiny_arch)
    out = vae.decode(w, np.ones(tiny_arch.latent_dim))
    assert out.shape == (2, 16, 16)
    assert not out.any()


def test_decode_matches_reference_forward(tiny_arch):
    w = vae.init_weights(tiny_arch, 43)
    z = np.random.default_rng(3).normal(size=tiny_arch.latent_dim)
    out = vae.decode(w, z)
    ref = naive_decode(w, z)
    np.testing.assert_allclose(out, ref, rtol=1e-4, atol=1e-5)


def test_encode_rejects_wrong_shape(tiny_arch):
    w = vae.init_weights(tiny_arch, 0)
    with pytest.raises(ValueError):
        vae.encode(w, np.zeros((2, 8, 8), dtype=np.float32))
    with pytest.raises(ValueError):
        vae.encode(w, np.zeros((3, 16, 16), dtype=np.float32))


# ---------------------------------------------------------------------------
# reparameterize
# ---------------------------------------------------------------------------

def test_reparameterize_examples():
    post = LatentPosterior(mu=np.array([1.0, -2.0]), logvar=np.zeros(2))
    np.testing.assert_allclose(vae.reparameterize(post, np.zeros(2)), [1.0, -2.0])
    np.testing.assert_allclose(vae.reparameterize(post, np.ones(2)), [2.0, -1.0])
    post2 = LatentPosterior(mu=np.zeros(2), logvar=np.array([2 * np.log(2.0), 0.0]))
    z = vae.reparameterize(post2, np.array([1.0, 0.0]))
    np.testing.assert_allclose(z, [2.0, 0.0])


def test_reparameterize_length_mismatch():
    post = LatentPosterior(mu=np.zeros(3), logvar=np.zeros(3))
    with pytest.raises(ValueError):
        vae.reparameterize(post, np.zeros(2))


# ---------------------------------------------------------------------------
# kl_score
# ---------------------------------------------------------------------------

def test_kl_score_closed_forms():
    m = 24
    assert vae.kl_score(LatentPosterior(np.zeros(m), np.zeros(m))) == 0.0
    assert vae.kl_score(LatentPosterior(np.array([1.0]), np.array([0.0]))) == pytest.approx(0.5)
    assert vae.kl_score(LatentPosterior(np.array([0.0]), np.array([1.0]))) == pytest.approx(
        0.5 * (np.e - 2.0))


def _mc_kl(post, n=10**6, seed=0):
    """Monte-Carlo KL(q || N(0,1)) estimate, summed over dimensions."""
    rng = np.random.default_rng(seed)
    std = np.exp(0.5 * post.logvar)
    z = post.mu + std * rng.standard_normal((n, post.dim))
    log_q = -0.5 * (((z - post.mu) / std) ** 2 + post.logvar + np.log(2 * np.pi))
    log_p = -0.5 * (z ** 2 + np.log(2 * np.pi))
    return float((log_q - log_p).sum(axis=1).mean())


def test_kl_score_matches_monte_carlo():
    rng = np.random.default_rng(12)
    for i in range(3):
        post = LatentPosterior(mu=rng.normal(size=4), logvar=rng.uniform(-1, 1, 4))
        exact = vae.kl_score(post)
        assert exact == pytest.approx(_mc_kl(post, seed=i), rel=0.01)


def test_kl_score_invariances():
    rng = np.random.default_rng(13)
    mu, logvar = rng.normal(size=6), rng.uniform(-1, 1, 6)
    base = vae.kl_score(LatentPosterior(mu, logvar))
    perm = rng.permutation(6)
    assert vae.kl_score(LatentPosterior(mu[perm], logvar[perm])) == pytest.approx(base)
    # additive over dimensions
    parts = sum(vae.kl_score(LatentPosterior(mu[i:i + 1], logvar[i:i + 1]))
                for i in range(6))
    assert parts == pytest.approx(base)
    # strictly convex in mu at fixed logvar (midpoint inequality)
    mu2 = mu + rng.normal(size=6)
    mid = vae.kl_score(LatentPosterior((mu + mu2) / 2, logvar))
    avg = 0.5 * (base + vae.kl_score(LatentPosterior(mu2, logvar)))
    assert mid < avg


def test_posterior_validation():
    with pytest.raises(ValueError):
        LatentPosterior(np.zeros(3), np.zeros(2))
    with pytest.raises(ValueError):
        LatentPosterior(np.array([np.nan]), np.zeros(1))
    with pytest.raises(ValueError):
        LatentPosterior(np.zeros(1), np.array([11.0]))  # beyond the clamp range


# ---------------------------------------------------------------------------
# preprocess
# ---------------------------------------------------------------------------

def test_preprocess_zero_flow(tiny_arch):
    out = vae.preprocess(np.zeros((2, 32, 32), dtype=np.float32), tiny_arch)
    assert out.shape == (2, 16, 16)
    assert not out.any()


def test_preprocess_clamp_boundary(tiny_arch):
    flow = np.zeros((2, 16, 16), dtype=np.float32)
    flow[0] = 8.0
    out = vae.preprocess(flow, tiny_arch, max_flow=8.0)
    np.testing.assert_allclose(out[0], 1.0)
    np.testing.assert_allclose(out[1], 0.0)
    flow[0] = 50.0  # beyond the clamp
    np.testing.assert_allclose(vae.preprocess(flow, tiny_arch, 8.0)[0], 1.0)


def test_preprocess_downsample_block_mean():
    arch = VaeArchitecture(input_size=64)
    yy, xx = np.mgrid[0:128, 0:128].astype(np.float64)
    flow = np.stack([0.01 * xx, 0.02 * yy]).astype(np.float32)
    out = vae.preprocess(flow, arch, max_flow=8.0)
    blocks = flow[0].reshape(64, 2, 64, 2).mean(axis=(1, 3)) / 8.0
    np.testing.assert_allclose(out[0], blocks, rtol=1e-5, atol=1e-7)


def test_preprocess_rejects_bad_max_flow(tiny_arch):
    with pytest.raises(ValueError):
        vae.preprocess(np.zeros((2, 16, 16), dtype=np.float32), tiny_arch, 0.0)


# ---------------------------------------------------------------------------
# weight files
# ---------------------------------------------------------------------------

def test_weights_round_trip_bit_exact(tmp_path, tiny_arch):
    w = vae.init_weights(tiny_arch, 99, max_flow=4.0)
    p = tmp_path / "w.bin"
    vae.save_weights(p, w)
    back = vae.load_weights(p)
    assert back.arch == tiny_arch
    assert back.max_flow == 4.0
    for name in w.tensors:
        assert np.array_equal(back.tensors[name], w.tensors[name])


def test_load_weights_architecture_mismatch(tmp_path, tiny_arch):
    p = tmp_path / "w.bin"
    vae.save_weights(p, vae.init_weights(tiny_arch, 0))
    wrong = VaeArchitecture(input_size=16, latent_dim=16)
    with pytest.raises(gridio.FormatError, match="match"):
        vae.load_weights(p, expected=wrong)


def test_load_weights_truncated(tmp_path, tiny_arch):
    p = tmp_path / "w.bin"
    vae.save_weights(p, vae.init_weights(tiny_arch, 0))
    data = p.read_bytes()
    p.write_bytes(data[:len(data) // 2])
    with pytest.raises(EOFError):
        vae.load_weights(p)


def test_load_weights_bad_magic_and_trailing(tmp_path, tiny_arch):
    p = tmp_path / "w.bin"
    vae.save_weights(p, vae.init_weights(tiny_arch, 0))
    data = p.read_bytes()
    p.write_bytes(b"XXXX" + data[4:])
    with pytest.raises(gridio.FormatError, match="magic"):
        vae.load_weights(p)
    p.write_bytes(data + b"\x00")
    with pytest.raises(gridio.FormatError, match="trailing"):
        vae.load_weights(p)


def test_init_weights_deterministic(tiny_arch):
    a = vae.init_weights(tiny_arch, 7)
    b = vae.init_weights(tiny_arch, 7)
    for name in a.tensors:
        assert np.array_equal(a.tensors[name], b.tensors[name])
    c = vae.init_weights(tiny_arch, 8)
    assert any(not np.array_equal(a.tensors[n], c.tensors[n]) for n in a.tensors)
