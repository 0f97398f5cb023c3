"""Latent-domain penalties and gradient/input conditioners.

The three penalties (total variation, range, moment) are differentiable scalar
functions of a latent grid.  The three conditioners reshape either the
gradient (spectral filtering, decaying Gaussian smoothing) or the input
(random jitter / rotation / scaling) during optimization.

All functions accept numpy arrays or torch tensors laid out as ``(..., H, W)``;
leading axes are treated as independent channels.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
import torch.nn.functional as F

from lvo._validation import as_tensor, check_int, check_nonneg

# Values outside this band are rarely produced by a standardized VAE encoder.
LATENT_RANGE = 3.0


@dataclass(frozen=True)
class RegularizerWeights:
    """Weights of the penalty terms and settings of the conditioners."""

    tv_weight: float = 0.0
    range_weight: float = 0.0
    moment_weight: float = 0.0
    spectral_filter: bool = False
    smoothing_sigma0: float = 0.0
    jitter_px: int = 0
    rotation_deg: float = 0.0
    scale_factor: float = 1.0

    def __post_init__(self):
        for name in ("tv_weight", "range_weight", "moment_weight", "smoothing_sigma0", "rotation_deg"):
            check_nonneg(getattr(self, name), name)
        check_int(self.jitter_px, "jitter_px", minimum=0)
        if not isinstance(self.spectral_filter, bool):
            raise TypeError(f"spectral_filter must be a bool, got {self.spectral_filter!r}")
        if not np.isfinite(self.scale_factor) or self.scale_factor < 1:
            raise ValueError(f"scale_factor must be >= 1, got {self.scale_factor!r}")

    @classmethod
    def raw_default(cls) -> "RegularizerWeights":
        """Calibrated bundle for raw layer channels."""
        return cls(tv_weight=0.5, range_weight=0.5, moment_weight=0.0, spectral_filter=True,
                   smoothing_sigma0=0.5, jitter_px=1, rotation_deg=5.0, scale_factor=1.1)

    @classmethod
    def sae_default(cls) -> "RegularizerWeights":
        """Calibrated bundle for sparse-autoencoder features."""
        return cls(tv_weight=0.0, range_weight=0.5, moment_weight=0.5, spectral_filter=True,
                   smoothing_sigma0=0.0, jitter_px=1, rotation_deg=5.0, scale_factor=1.1)

    @classmethod
    def disabled(cls) -> "RegularizerWeights":
        return cls()

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RegularizerWeights":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown regularizer keys: {sorted(unknown)}")
        kwargs = dict(d)
        if "jitter_px" in kwargs:
            kwargs["jitter_px"] = int(kwargs["jitter_px"])
        for key in ("tv_weight", "range_weight", "moment_weight", "smoothing_sigma0",
                    "rotation_deg", "scale_factor"):
            if key in kwargs:
                kwargs[key] = float(kwargs[key])
        return cls(**kwargs)


@dataclass(frozen=True)
class TransformRecord:
    """Parameters drawn by :func:`apply_random_transform`."""

    shift_x: int
    shift_y: int
    angle_deg: float
    scale: float

    @property
    def is_identity(self) -> bool:
        return self.shift_x == 0 and self.shift_y == 0 and self.angle_deg == 0.0 and self.scale == 1.0


def _finish(value: torch.Tensor, tensor_in: bool):
    return value if tensor_in else float(value)


def _spatial(z, name="z", min_hw=1) -> torch.Tensor:
    z = as_tensor(z)
    if z.ndim < 2:
        raise ValueError(f"{name} needs at least two spatial axes, got shape {tuple(z.shape)}")
    h, w = z.shape[-2:]
    if h < min_hw or w < min_hw:
        raise ValueError(f"{name} spatial dims must be >= {min_hw}, got {h}x{w}")
    return z


def tv_penalty(z):
    """Anisotropic total variation, normalized by H*W and averaged over channels.

    Only neighbour pairs inside the grid contribute (no wrap-around).
    """
    tensor_in = isinstance(z, torch.Tensor)
    z = _spatial(z)
    if not torch.isfinite(z.detach()).all():
        raise ValueError("tv_penalty received non-finite values")
    h, w = z.shape[-2:]
    dv = (z[..., 1:, :] - z[..., :-1, :]).abs().sum(dim=(-2, -1))
    dh = (z[..., :, 1:] - z[..., :, :-1]).abs().sum(dim=(-2, -1))
    per_channel = (dv + dh) / (h * w)
    return _finish(per_channel.mean(), tensor_in)


def range_penalty(z):
    """Mean squared excess of ``|z|`` over the decoder's working range."""
    tensor_in = isinstance(z, torch.Tensor)
    z = as_tensor(z)
    return _finish(F.relu(z.abs() - LATENT_RANGE).pow(2).mean(), tensor_in)


def moment_penalty(z):
    """``|mean| + |std - 1|`` over all elements jointly (population variance)."""
    tensor_in = isinstance(z, torch.Tensor)
    z = as_tensor(z)
    if z.numel() < 2:
        raise ValueError("moment_penalty needs at least 2 elements")
    mean = z.mean()
    std = (z - mean).pow(2).mean().sqrt()
    return _finish(mean.abs() + (std - 1).abs(), tensor_in)


def total_penalty(z, weights: RegularizerWeights):
    """Weighted sum of the three penalties; zero-weight terms are skipped."""
    tensor_in = isinstance(z, torch.Tensor)
    z = as_tensor(z)
    total = z.new_zeros(())
    if weights.tv_weight:
        total = total + weights.tv_weight * tv_penalty(z)
    if weights.range_weight:
        total = total + weights.range_weight * range_penalty(z)
    if weights.moment_weight:
        total = total + weights.moment_weight * moment_penalty(z)
    return _finish(total, tensor_in)


def spectral_weights(h: int, w: int, dtype=torch.float64) -> torch.Tensor:
    """Inverse-frequency weights on the ``fft2`` grid, clamped at the lowest
    nonzero frequency and scaled so the largest weight is 1."""
    fy = torch.fft.fftfreq(h, dtype=torch.float64)[:, None]
    fx = torch.fft.fftfreq(w, dtype=torch.float64)[None, :]
    radial = torch.sqrt(fy ** 2 + fx ** 2)
    f_min = radial[radial > 0].min()
    weights = f_min / torch.clamp(radial, min=f_min)
    return weights.to(dtype)


def spectral_filter(g):
    """Attenuate high spatial frequencies of ``g`` by the inverse radial frequency."""
    tensor_in = isinstance(g, torch.Tensor)
    g = _spatial(g, "g", min_hw=2)
    h, w = g.shape[-2:]
    real_dtype = g.dtype if g.is_floating_point() else torch.get_default_dtype()
    weights = spectral_weights(h, w, dtype=real_dtype).to(g.device)
    out = torch.fft.ifft2(torch.fft.fft2(g) * weights).real.to(real_dtype)
    return out if tensor_in else out.numpy()


def gaussian_kernel1d(sigma: float, truncate: float = 4.0) -> np.ndarray:
    radius = int(truncate * sigma + 0.5)
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def _blur_axis(x: torch.Tensor, kernel: np.ndarray, axis: int) -> torch.Tensor:
    radius = len(kernel) // 2
    if radius == 0:
        return x
    n = x.shape[axis]
    # half-sample symmetric extension: ... b a | a b c ... | c b ...
    idx = np.pad(np.arange(n), radius, mode="symmetric")
    padded = x.index_select(axis, torch.as_tensor(idx, device=x.device))
    out = torch.zeros_like(x)
    for offset, weight in enumerate(kernel):
        out = out + float(weight) * padded.narrow(axis, offset, n)
    return out


def smooth_gradient(g, step: int, total_steps: int, sigma0: float):
    """Gaussian blur whose sigma decays linearly from ``sigma0`` to 0 over the run."""
    check_int(total_steps, "total_steps", minimum=1)
    check_int(step, "step", minimum=0)
    if step >= total_steps:
        raise ValueError(f"step must be < total_steps ({total_steps}), got {step}")
    check_nonneg(sigma0, "sigma0")
    sigma = sigma0 * (1.0 - step / total_steps)
    if sigma == 0:
        return g
    tensor_in = isinstance(g, torch.Tensor)
    g = _spatial(g, "g")
    kernel = gaussian_kernel1d(sigma)
    out = _blur_axis(_blur_axis(g, kernel, g.ndim - 2), kernel, g.ndim - 1)
    return out if tensor_in else out.numpy()


def _draw_transform(weights: RegularizerWeights, rng: torch.Generator) -> TransformRecord:
    j = weights.jitter_px
    shifts = torch.randint(-j, j + 1, (2,), generator=rng)
    u = torch.rand(2, generator=rng, dtype=torch.float64)
    angle = float((2 * u[0] - 1) * weights.rotation_deg)
    s = weights.scale_factor
    scale = float(1 / s + u[1] * (s - 1 / s))
    return TransformRecord(int(shifts[0]), int(shifts[1]), angle, scale)


def transform_latent(z, record: TransformRecord):
    """Apply shift, then rotation, then scaling about the grid center.

    Bilinear resampling with reflective borders; linear (hence differentiable)
    in ``z``.
    """
    z = _spatial(z)
    if record.is_identity:
        return z
    h, w = z.shape[-2:]
    lead = z.shape[:-2]
    dtype = z.dtype if z.is_floating_point() else torch.get_default_dtype()
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    ys, xs = torch.meshgrid(torch.arange(h, dtype=torch.float64), torch.arange(w, dtype=torch.float64),
                            indexing="ij")
    theta = math.radians(record.angle_deg)
    cos, sin = math.cos(theta), math.sin(theta)
    # Content at p lands at c + s R (p + d - c); invert for each output pixel.
    qx, qy = (xs - cx) / record.scale, (ys - cy) / record.scale
    px = cos * qx + sin * qy + cx - record.shift_x
    py = -sin * qx + cos * qy + cy - record.shift_y
    grid = torch.stack([(2 * px + 1) / w - 1, (2 * py + 1) / h - 1], dim=-1).to(dtype)
    flat = z.reshape(1, -1, h, w).to(dtype)
    out = F.grid_sample(flat, grid[None], mode="bilinear", padding_mode="reflection", align_corners=False)
    return out.reshape(*lead, h, w)


def apply_random_transform(z, weights: RegularizerWeights, rng: torch.Generator):
    """Randomly jitter, rotate and scale ``z``.

    Returns the transformed latent and the :class:`TransformRecord` of drawn
    parameters. The generator is always advanced by the same amount, so
    downstream draws do not depend on whether the transform was a no-op.
    """
    tensor_in = isinstance(z, torch.Tensor)
    record = _draw_transform(weights, rng)
    out = transform_latent(as_tensor(z), record)
    return (out if tensor_in else out.numpy()), record
