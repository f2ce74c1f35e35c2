"""Convolutional VAE forward passes, nonconformity scoring, and weight files.

The encoder maps a 2-channel flow field through four stride-2 convolutions
(ReLU) to a diagonal-Gaussian latent posterior; the decoder mirrors it with
transposed convolutions.  The nonconformity score of an input is the KL
divergence of its posterior from the standard-normal prior, summed over
latent dimensions: small for motion resembling the training data, large for
out-of-distribution motion.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import nnops

WEIGHTS_MAGIC = b"VAEW"
WEIGHTS_VERSION = 1

LOGVAR_MIN = -10.0
LOGVAR_MAX = 10.0

DEFAULT_MAX_FLOW = 8.0


class NumericError(ArithmeticError):
    """A computation produced non-finite values."""


@dataclass(frozen=True)
class VaeArchitecture:
    """Fixed 4-layer conv family: kernel 4, stride 2, padding 1 per layer.

    Each encoder layer halves the spatial size, so input_size must be
    divisible by 16; the last conv volume is conv_channels[-1] channels at
    input_size/16 resolution.
    """

    input_size: int = 64
    latent_dim: int = 24
    conv_channels: tuple[int, int, int, int] = (32, 64, 128, 256)
    kernel: int = 4
    stride: int = 2
    padding: int = 1
    input_channels: int = 2

    def __post_init__(self):
        if len(self.conv_channels) != 4:
            raise ValueError("conv_channels must list exactly 4 layer widths")
        if self.input_size < 16 or self.input_size % 16 != 0:
            raise ValueError("input_size must be a positive multiple of 16")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")

    @property
    def grid_size(self) -> int:
        return self.input_size // 16

    @property
    def flat_dim(self) -> int:
        return self.conv_channels[-1] * self.grid_size * self.grid_size

    def tensor_shapes(self) -> dict[str, tuple[int, ...]]:
        """Shapes of all weight tensors, in canonical serialization order."""
        chans = (self.input_channels,) + tuple(self.conv_channels)
        k = self.kernel
        shapes: dict[str, tuple[int, ...]] = {}
        for i in range(4):
            shapes[f"enc{i}_w"] = (chans[i + 1], chans[i], k, k)
            shapes[f"enc{i}_b"] = (chans[i + 1],)
        shapes["mu_w"] = (self.latent_dim, self.flat_dim)
        shapes["mu_b"] = (self.latent_dim,)
        shapes["logvar_w"] = (self.latent_dim, self.flat_dim)
        shapes["logvar_b"] = (self.latent_dim,)
        shapes["dec_w"] = (self.flat_dim, self.latent_dim)
        shapes["dec_b"] = (self.flat_dim,)
        rev = tuple(reversed(chans))  # (256, 128, 64, 32, 2) for defaults
        for i in range(4):
            shapes[f"tdec{i}_w"] = (rev[i], rev[i + 1], k, k)
            shapes[f"tdec{i}_b"] = (rev[i + 1],)
        return shapes


@dataclass(frozen=True)
class LatentPosterior:
    """Diagonal-Gaussian posterior parameters: per-dimension mean and log-variance."""

    mu: np.ndarray
    logvar: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        logvar = np.asarray(self.logvar, dtype=np.float64)
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "logvar", logvar)
        if mu.ndim != 1 or logvar.ndim != 1 or mu.shape != logvar.shape:
            raise ValueError("mu and logvar must be 1-D arrays of equal length")
        if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
            raise ValueError("posterior parameters must be finite")
        if np.any(logvar < LOGVAR_MIN) or np.any(logvar > LOGVAR_MAX):
            raise ValueError(f"logvar must lie in [{LOGVAR_MIN}, {LOGVAR_MAX}]")

    @property
    def dim(self) -> int:
        return self.mu.shape[0]


@dataclass(frozen=True)
class EncodeOutput:
    posterior: LatentPosterior
    last_conv_activations: np.ndarray  # (conv_channels[-1], s/16, s/16)


@dataclass
class VaeWeights:
    """All network parameters plus the preprocessing range they were trained with."""

    arch: VaeArchitecture
    max_flow: float
    tensors: dict[str, np.ndarray] = field(repr=False)

    def __post_init__(self):
        if self.max_flow <= 0:
            raise ValueError("max_flow must be positive")
        shapes = self.arch.tensor_shapes()
        if set(self.tensors) != set(shapes):
            missing = set(shapes) - set(self.tensors)
            extra = set(self.tensors) - set(shapes)
            raise ValueError(f"tensor set mismatch: missing {missing}, extra {extra}")
        for name, shape in shapes.items():
            t = self.tensors[name]
            if t.shape != shape:
                raise ValueError(f"tensor {name} has shape {t.shape}, expected {shape}")
            if not np.all(np.isfinite(t)):
                raise ValueError(f"tensor {name} contains non-finite values")


def init_params(arch: VaeArchitecture,
                seed: int | np.random.Generator) -> dict[str, np.ndarray]:
    """Seeded fan-in-scaled uniform init (bound sqrt(6/fan_in)), zero biases.

    Returns float64 tensors in canonical order; the draw order is part of
    the determinism contract.  ``seed`` may be an existing Generator so a
    caller can keep init and later draws on one stream.
    """
    rng = np.random.default_rng(seed)
    params: dict[str, np.ndarray] = {}
    for name, shape in arch.tensor_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape, dtype=np.float64)
            continue
        if name.endswith("_w") and len(shape) == 4:
            fan_in = shape[1] * shape[2] * shape[3]
        else:
            fan_in = shape[1]
        bound = np.sqrt(6.0 / fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    return params


def init_weights(arch: VaeArchitecture, seed: int,
                 max_flow: float = DEFAULT_MAX_FLOW) -> VaeWeights:
    """Freshly initialized float32 weights (see :func:`init_params`)."""
    params = init_params(arch, seed)
    tensors = {k: v.astype(np.float32) for k, v in params.items()}
    return VaeWeights(arch=arch, max_flow=max_flow, tensors=tensors)


def _check_finite(name: str, arr: np.ndarray) -> None:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"non-finite values in {name}")


def encode_batch(weights: VaeWeights, flows: np.ndarray):
    """Forward the encoder on (N, 2, S, S) inputs.

    Returns (mu, logvar, activations): (N, m), (N, m) with logvar clamped,
    and the post-ReLU volume of the fourth conv layer (N, C4, S/16, S/16).
    """
    arch = weights.arch
    x = np.ascontiguousarray(flows, dtype=np.float32)
    expected = (arch.input_channels, arch.input_size, arch.input_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise ValueError(f"encoder input must be (N, {expected[0]}, {expected[1]}, "
                         f"{expected[2]}), got {x.shape}")
    t = weights.tensors
    h = x
    for i in range(4):
        h, _ = nnops.conv2d(h, t[f"enc{i}_w"], t[f"enc{i}_b"],
                            arch.stride, arch.padding)
        h = nnops.relu(h)
    acts = h
    flat = h.reshape(h.shape[0], -1)
    mu = nnops.linear(flat, t["mu_w"], t["mu_b"])
    logvar = np.clip(nnops.linear(flat, t["logvar_w"], t["logvar_b"]),
                     LOGVAR_MIN, LOGVAR_MAX)
    _check_finite("encoder outputs", mu)
    _check_finite("encoder outputs", logvar)
    _check_finite("encoder activations", acts)
    return mu, logvar, acts


def encode(weights: VaeWeights, flow: np.ndarray) -> EncodeOutput:
    """Encode one preprocessed flow field into its latent posterior.

    Also exposes the last conv layer's activation volume, which the
    localization overlay compares against calibration statistics.
    """
    flow = np.asarray(flow)
    if flow.ndim != 3:
        raise ValueError(f"flow must be (C, H, W), got shape {flow.shape}")
    mu, logvar, acts = encode_batch(weights, flow[np.newaxis])
    return EncodeOutput(
        posterior=LatentPosterior(mu=mu[0], logvar=logvar[0]),
        last_conv_activations=acts[0],
    )


def reparameterize(posterior: LatentPosterior, noise: np.ndarray) -> np.ndarray:
    """Draw z = mu + exp(logvar/2) * noise for given standard-normal noise."""
    noise = np.asarray(noise, dtype=np.float64)
    if noise.shape != posterior.mu.shape:
        raise ValueError(f"noise length {noise.shape} does not match latent "
                         f"dimension {posterior.mu.shape}")
    return posterior.mu + np.exp(0.5 * posterior.logvar) * noise


def decode_batch(weights: VaeWeights, z: np.ndarray) -> np.ndarray:
    """Forward the decoder on (N, m) latents; returns (N, 2, S, S)."""
    arch = weights.arch
    z = np.ascontiguousarray(z, dtype=np.float32)
    if z.ndim != 2 or z.shape[1] != arch.latent_dim:
        raise ValueError(f"decoder input must be (N, {arch.latent_dim}), got {z.shape}")
    t = weights.tensors
    h = nnops.relu(nnops.linear(z, t["dec_w"], t["dec_b"]))
    h = h.reshape(z.shape[0], arch.conv_channels[-1], arch.grid_size, arch.grid_size)
    for i in range(4):
        h = nnops.conv_transpose2d(h, t[f"tdec{i}_w"], t[f"tdec{i}_b"],
                                   arch.stride, arch.padding)
        if i < 3:
            h = nnops.relu(h)
    _check_finite("decoder output", h)
    return h


def decode(weights: VaeWeights, z: np.ndarray) -> np.ndarray:
    """Decode one latent vector into a (2, S, S) flow reconstruction."""
    z = np.asarray(z)
    if z.ndim != 1:
        raise ValueError(f"z must be 1-D, got shape {z.shape}")
    return decode_batch(weights, z[np.newaxis])[0]


def kl_score(posterior: LatentPosterior) -> float:
    """Nonconformity score: KL(q(z|x) || N(0, I)) summed over dimensions.

    Closed form per dimension: 0.5 * (mu^2 + exp(logvar) - logvar - 1).
    Zero exactly when the posterior is standard normal, positive otherwise.
    """
    mu, logvar = posterior.mu, posterior.logvar
    return float(0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0))


def kl_scores_from(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """Vectorized :func:`kl_score` over a batch of posteriors (N, m)."""
    return 0.5 * np.sum(mu * mu + np.exp(logvar) - logvar - 1.0, axis=1)


def preprocess(flow: np.ndarray, arch: VaeArchitecture,
               max_flow: float = DEFAULT_MAX_FLOW) -> np.ndarray:
    """Resize a (2, H, W) flow field to the encoder input and scale to [-1, 1].

    Bilinear resize to input_size, clamp to [-max_flow, max_flow], divide by
    max_flow.  The same max_flow must be used at training and inference; it
    is recorded in the weights file.
    """
    if max_flow <= 0:
        raise ValueError("max_flow must be positive")
    f = np.asarray(flow)
    if f.ndim != 3 or f.shape[0] != arch.input_channels:
        raise ValueError(f"flow must be ({arch.input_channels}, H, W), got {f.shape}")
    resized = nnops.bilinear_resize(f.astype(np.float64), arch.input_size,
                                    arch.input_size)
    clipped = np.clip(resized, -max_flow, max_flow)
    return (clipped / max_flow).astype(np.float32)


# ---------------------------------------------------------------------------
# Weight serialization
# ---------------------------------------------------------------------------

def save_weights(path, weights: VaeWeights) -> None:
    """Write weights with a self-describing architecture header.

    Layout: magic ``VAEW``, u32 version, u32 input_size, u32 latent_dim,
    f32 max_flow, u32 conv layer count, u32 channel widths, then every
    tensor in canonical order as little-endian float32.
    """
    arch = weights.arch
    with open(path, "wb") as fh:
        fh.write(WEIGHTS_MAGIC)
        fh.write(struct.pack("<II", WEIGHTS_VERSION, arch.input_size))
        fh.write(struct.pack("<If", arch.latent_dim, weights.max_flow))
        fh.write(struct.pack("<I", len(arch.conv_channels)))
        fh.write(struct.pack(f"<{len(arch.conv_channels)}I", *arch.conv_channels))
        for name in arch.tensor_shapes():
            fh.write(np.ascontiguousarray(weights.tensors[name], dtype="<f4").tobytes())


def load_weights(path, expected: VaeArchitecture | None = None) -> VaeWeights:
    """Read a weights file; optionally enforce an expected architecture.

    Raises FormatError on magic/version/shape mismatch and EOFError when the
    file is truncated (no partial weights are returned).
    """
    from .gridio import FormatError

    def take(fh, n: int, what: str) -> bytes:
        buf = fh.read(n)
        if len(buf) != n:
            raise EOFError(f"truncated weights file while reading {what}")
        return buf

    with open(path, "rb") as fh:
        magic = take(fh, 4, "magic")
        if magic != WEIGHTS_MAGIC:
            raise FormatError(f"bad weights magic {magic!r}")
        version, input_size = struct.unpack("<II", take(fh, 8, "header"))
        if version != WEIGHTS_VERSION:
            raise FormatError(f"unsupported weights version {version}")
        latent_dim, max_flow = struct.unpack("<If", take(fh, 8, "header"))
        (n_conv,) = struct.unpack("<I", take(fh, 4, "header"))
        channels = struct.unpack(f"<{n_conv}I", take(fh, 4 * n_conv, "header"))
        try:
            arch = VaeArchitecture(input_size=input_size, latent_dim=latent_dim,
                                   conv_channels=tuple(channels))
        except ValueError as exc:
            raise FormatError(f"invalid architecture in weights header: {exc}") from exc
        if expected is not None and arch != expected:
            raise FormatError(
                f"weights architecture {arch} does not match expected {expected}"
            )
        tensors: dict[str, np.ndarray] = {}
        for name, shape in arch.tensor_shapes().items():
            count = int(np.prod(shape))
            raw = take(fh, 4 * count, f"tensor {name}")
            tensors[name] = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after final tensor")
    return VaeWeights(arch=arch, max_flow=float(max_flow), tensors=tensors)
