"""VAE training with hand-derived backpropagation, plus calibration-set building.

The objective per sample is the sum-of-squares reconstruction error plus
beta_kl times the posterior KL from the standard-normal prior; batches are
averaged.  Everything is computed in float64 from a single seeded generator
(init draws, epoch shuffles, reparameterization noise), so a (dataset,
config) pair fixes the resulting weights bit-exactly.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from . import nnops, vae
from .vae import (LatentPosterior, NumericError, VaeArchitecture, VaeWeights,
                  kl_score)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int
    batch_size: int = 32
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_epsilon: float = 1e-8
    beta_kl: float = 1.0
    seed: int = 0
    calibration_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0.0 < self.calibration_fraction < 1.0:
            raise ValueError("calibration_fraction must be in (0, 1)")


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mean_total: float
    mean_recon: float
    mean_kl: float


@dataclass(frozen=True)
class CalibrationSet:
    """Ascending nonconformity scores of held-out in-distribution samples."""

    scores: np.ndarray

    def __post_init__(self):
        scores = np.asarray(self.scores, dtype=np.float64)
        object.__setattr__(self, "scores", scores)
        if scores.ndim != 1 or scores.size < 1:
            raise ValueError("calibration set needs at least one score")
        if not np.all(np.isfinite(scores)):
            raise ValueError("calibration scores must be finite")
        if np.any(np.diff(scores) < 0):
            raise ValueError("calibration scores must be sorted ascending")

    @property
    def size(self) -> int:
        return int(self.scores.size)


def elbo_loss(recon, target, posterior: LatentPosterior,
              beta_kl: float = 1.0) -> tuple[float, float, float]:
    """Per-sample loss: (total, reconstruction term, KL term).

    The reconstruction term is the sum of squared differences over all
    elements; total = recon + beta_kl * kl.
    """
    recon = np.asarray(recon, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if recon.shape != target.shape:
        raise ValueError(f"shape mismatch: {recon.shape} vs {target.shape}")
    recon_term = float(np.sum((recon - target) ** 2))
    kl_term = kl_score(posterior)
    return recon_term + beta_kl * kl_term, recon_term, kl_term


# ---------------------------------------------------------------------------
# Forward/backward through the fixed architecture (float64)
# ---------------------------------------------------------------------------

def _forward(params: dict[str, np.ndarray], arch: VaeArchitecture,
             x: np.ndarray, noise: np.ndarray, beta_kl: float):
    """Full VAE forward; returns per-sample loss terms and backprop caches."""
    s, p = arch.stride, arch.padding
    cache: dict = {"x": x}
    h = x
    enc_cols, enc_pre = [], []
    for i in range(4):
        y, cols = nnops.conv2d(h, params[f"enc{i}_w"], params[f"enc{i}_b"], s, p)
        enc_cols.append(cols)
        enc_pre.append(y)
        cache[f"enc{i}_in_shape"] = h.shape
        h = nnops.relu(y)
        cache[f"enc{i}_act"] = h
    n = x.shape[0]
    flat = h.reshape(n, -1)
    mu = nnops.linear(flat, params["mu_w"], params["mu_b"])
    logvar_raw = nnops.linear(flat, params["logvar_w"], params["logvar_b"])
    logvar = np.clip(logvar_raw, vae.LOGVAR_MIN, vae.LOGVAR_MAX)
    std = np.exp(0.5 * logvar)
    z = mu + std * noise

    d_pre = nnops.linear(z, params["dec_w"], params["dec_b"])
    d_act = nnops.relu(d_pre)
    vol = d_act.reshape(n, arch.conv_channels[-1], arch.grid_size, arch.grid_size)
    t_in = vol
    tdec_in, tdec_pre = [], []
    for i in range(4):
        tdec_in.append(t_in)
        y = nnops.conv_transpose2d(t_in, params[f"tdec{i}_w"], params[f"tdec{i}_b"], s, p)
        tdec_pre.append(y)
        t_in = nnops.relu(y) if i < 3 else y
    recon = t_in

    diff = recon - x
    recon_per = np.sum(diff * diff, axis=(1, 2, 3))
    kl_per = 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0, axis=1)
    total_per = recon_per + beta_kl * kl_per

    cache.update(enc_cols=enc_cols, enc_pre=enc_pre, flat=flat, mu=mu,
                 logvar_raw=logvar_raw, logvar=logvar, std=std, noise=noise,
                 z=z, d_pre=d_pre, tdec_in=tdec_in, tdec_pre=tdec_pre, diff=diff)
    return total_per, recon_per, kl_per, cache


def _backward(params: dict[str, np.ndarray], arch: VaeArchitecture,
              cache: dict, beta_kl: float) -> dict[str, np.ndarray]:
    """Gradients of mean per-sample total loss w.r.t. every parameter."""
    s, p = arch.stride, arch.padding
    n = cache["x"].shape[0]
    grads: dict[str, np.ndarray] = {}

    g = 2.0 * cache["diff"] / n
    for i in range(3, -1, -1):
        dx, dw, db = nnops.conv_transpose2d_backward(
            g, cache["tdec_in"][i], params[f"tdec{i}_w"], s, p)
        grads[f"tdec{i}_w"], grads[f"tdec{i}_b"] = dw, db
        g = nnops.relu_backward(dx, cache["tdec_pre"][i - 1]) if i > 0 else dx
    d_act_grad = g.reshape(n, -1)
    d_pre_grad = nnops.relu_backward(d_act_grad, cache["d_pre"])
    dz, grads["dec_w"], grads["dec_b"] = nnops.linear_backward(
        d_pre_grad, cache["z"], params["dec_w"])

    mu, logvar, std, noise = cache["mu"], cache["logvar"], cache["std"], cache["noise"]
    dmu = dz + (beta_kl / n) * mu
    dlogvar = dz * (0.5 * std * noise) + (beta_kl / n) * 0.5 * (np.exp(logvar) - 1.0)
    clamp_open = (cache["logvar_raw"] > vae.LOGVAR_MIN) & (cache["logvar_raw"] < vae.LOGVAR_MAX)
    dlogvar_raw = dlogvar * clamp_open

    dflat_mu, grads["mu_w"], grads["mu_b"] = nnops.linear_backward(
        dmu, cache["flat"], params["mu_w"])
    dflat_lv, grads["logvar_w"], grads["logvar_b"] = nnops.linear_backward(
        dlogvar_raw, cache["flat"], params["logvar_w"])
    g = (dflat_mu + dflat_lv).reshape(cache["enc3_act"].shape)

    for i in range(3, -1, -1):
        g = nnops.relu_backward(g, cache["enc_pre"][i])
        dx, dw, db = nnops.conv2d_backward(
            g, cache["enc_cols"][i], params[f"enc{i}_w"],
            cache[f"enc{i}_in_shape"], s, p)
        grads[f"enc{i}_w"], grads[f"enc{i}_b"] = dw, db
        g = dx
    return grads


def batch_loss(params: dict[str, np.ndarray], arch: VaeArchitecture,
               x: np.ndarray, noise: np.ndarray, beta_kl: float) -> float:
    """Mean per-sample total loss (the quantity train() descends)."""
    total_per, _, _, _ = _forward(params, arch, x, noise, beta_kl)
    return float(total_per.mean())


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

def train(dataset, config: TrainConfig, arch: VaeArchitecture | None = None,
          max_flow: float = vae.DEFAULT_MAX_FLOW):
    """Adam-optimize the VAE on preprocessed flow grids.

    Returns (VaeWeights, per-epoch EpochStats list).  With epochs == 0 the
    seeded initial weights are returned untouched.  Raises NumericError if a
    batch loss goes non-finite.
    """
    if len(dataset) == 0:
        raise ValueError("dataset must be nonempty")
    x_all = np.stack([np.asarray(d, dtype=np.float64) for d in dataset])
    if arch is None:
        if x_all.shape[2] != x_all.shape[3]:
            raise ValueError("flow grids must be square")
        arch = VaeArchitecture(input_size=x_all.shape[2])
    expected = (arch.input_channels, arch.input_size, arch.input_size)
    if x_all.shape[1:] != expected:
        raise ValueError(f"dataset items must have shape {expected}, got {x_all.shape[1:]}")

    rng = np.random.default_rng(config.seed)
    params = vae.init_params(arch, rng)
    m_state = {k: np.zeros_like(v) for k, v in params.items()}
    v_state = {k: np.zeros_like(v) for k, v in params.items()}
    step = 0
    n = x_all.shape[0]
    log: list[EpochStats] = []

    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        tot_sum = rec_sum = kl_sum = 0.0
        for start in range(0, n, config.batch_size):
            batch_idx = perm[start:start + config.batch_size]
            xb = x_all[batch_idx]
            noise = rng.standard_normal((xb.shape[0], arch.latent_dim))
            total_per, recon_per, kl_per, cache = _forward(
                params, arch, xb, noise, config.beta_kl)
            loss = float(total_per.mean())
            if not np.isfinite(loss):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch starting {start}: "
                    f"total={loss}"
                )
            tot_sum += float(total_per.sum())
            rec_sum += float(recon_per.sum())
            kl_sum += float(kl_per.sum())
            grads = _backward(params, arch, cache, config.beta_kl)
            step += 1
            b1c = 1.0 - config.adam_beta1 ** step
            b2c = 1.0 - config.adam_beta2 ** step
            for name in params:
                g = grads[name]
                m_state[name] = config.adam_beta1 * m_state[name] + (1 - config.adam_beta1) * g
                v_state[name] = config.adam_beta2 * v_state[name] + (1 - config.adam_beta2) * g * g
                mhat = m_state[name] / b1c
                vhat = v_state[name] / b2c
                params[name] -= config.learning_rate * mhat / (np.sqrt(vhat) + config.adam_epsilon)
        log.append(EpochStats(epoch=epoch, mean_total=tot_sum / n,
                              mean_recon=rec_sum / n, mean_kl=kl_sum / n))

    tensors = {k: v.astype(np.float32) for k, v in params.items()}
    return VaeWeights(arch=arch, max_flow=max_flow, tensors=tensors), log


def write_training_log(path, log: list[EpochStats]) -> None:
    """Emit the per-epoch loss log as CSV."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_total", "mean_recon", "mean_kl"])
        for row in log:
            writer.writerow([row.epoch, repr(row.mean_total), repr(row.mean_recon),
                             repr(row.mean_kl)])


# ---------------------------------------------------------------------------
# Verification and calibration
# ---------------------------------------------------------------------------

def gradient_check(weights: VaeWeights, sample, n_params: int = 120,
                   seed: int = 0, beta_kl: float = 1.0,
                   indices: list[tuple[str, int]] | None = None) -> float:
    """Compare analytic gradients against central finite differences.

    Runs in float64 with reparameterization noise fixed to zero; perturbation
    h = 1e-5 * max(1, |w|).  Returns the maximum relative error over the
    checked parameters (random unless ``indices`` names them explicitly).
    """
    arch = weights.arch
    params = {k: v.astype(np.float64) for k, v in weights.tensors.items()}
    x = np.asarray(sample, dtype=np.float64)[np.newaxis]
    noise = np.zeros((1, arch.latent_dim))

    _, _, _, cache = _forward(params, arch, x, noise, beta_kl)
    grads = _backward(params, arch, cache, beta_kl)

    if indices is None:
        names = list(params)
        sizes = np.array([params[k].size for k in names])
        offsets = np.concatenate([[0], np.cumsum(sizes)])
        rng = np.random.default_rng(seed)
        chosen = rng.choice(offsets[-1], size=min(n_params, offsets[-1]), replace=False)
        indices = []
        for flat in np.sort(chosen):
            t = int(np.searchsorted(offsets, flat, side="right")) - 1
            indices.append((names[t], int(flat - offsets[t])))

    worst = 0.0
    for name, idx in indices:
        w0 = params[name].flat[idx]
        h = 1e-5 * max(1.0, abs(w0))
        params[name].flat[idx] = w0 + h
        loss_p = batch_loss(params, arch, x, noise, beta_kl)
        params[name].flat[idx] = w0 - h
        loss_m = batch_loss(params, arch, x, noise, beta_kl)
        params[name].flat[idx] = w0
        numeric = (loss_p - loss_m) / (2.0 * h)
        analytic = grads[name].flat[idx]
        rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
        worst = max(worst, rel)
    return worst


def split_calibration(dataset, fraction: float, seed: int):
    """Seeded shuffle then split into (train_part, calibration_part)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("fraction must be in (0, 1)")
    items = list(dataset)
    n = len(items)
    n_cal = int(round(n * fraction))
    if n_cal == 0 or n_cal == n:
        raise ValueError(f"split of {n} items at fraction {fraction} leaves an empty part")
    perm = np.random.default_rng(seed).permutation(n)
    shuffled = [items[i] for i in perm]
    return shuffled[:n - n_cal], shuffled[n - n_cal:]


def build_calibration(weights: VaeWeights, cal_flows) -> CalibrationSet:
    """Score held-out flows via encode + KL and sort ascending.

    Samples are encoded one at a time: batched BLAS kernels are not
    bit-identical across batch positions, and the calibration set must be
    exactly permutation-invariant in its inputs.
    """
    flows = list(cal_flows)
    if not flows:
        raise ValueError("calibration flows must be nonempty")
    scores = [kl_score(vae.encode(weights, f).posterior) for f in flows]
    return CalibrationSet(scores=np.sort(np.asarray(scores, dtype=np.float64)))
