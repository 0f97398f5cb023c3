"""Input validation helpers shared by the estimators and the functional API."""

from __future__ import annotations

import numbers

import numpy as np
import torch


def as_tensor(x, dtype=None) -> torch.Tensor:
    """Return ``x`` as a torch tensor without copying when it already is one."""
    if isinstance(x, torch.Tensor):
        return x if dtype is None else x.to(dtype)
    arr = np.asarray(x)
    t = torch.from_numpy(np.ascontiguousarray(arr))
    if dtype is not None:
        t = t.to(dtype)
    elif not t.is_floating_point():
        t = t.to(torch.get_default_dtype())
    return t


def check_latent(z, name: str = "z", *, allow_batch: bool = False) -> torch.Tensor:
    """Validate a C x H x W latent grid (or B x C x H x W if ``allow_batch``)."""
    z = as_tensor(z)
    ndim_ok = z.ndim == 3 or (allow_batch and z.ndim == 4)
    if not ndim_ok:
        expected = "C x H x W" + (" or B x C x H x W" if allow_batch else "")
        raise ValueError(f"{name} must be {expected}, got shape {tuple(z.shape)}")
    if z.numel() == 0 or any(s < 1 for s in z.shape):
        raise ValueError(f"{name} must be non-empty, got shape {tuple(z.shape)}")
    if not torch.isfinite(z.detach()).all():
        raise ValueError(f"{name} contains non-finite values")
    return z


def check_nonneg(value, name: str) -> float:
    if not isinstance(value, numbers.Real) or not np.isfinite(value) or value < 0:
        raise ValueError(f"{name} must be a finite non-negative number, got {value!r}")
    return float(value)


def check_int(value, name: str, *, minimum: int | None = None) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise TypeError(f"{name} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValueError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_random_state(seed) -> torch.Generator:
    """Turn ``None`` / int / Generator into a seeded ``torch.Generator``."""
    if isinstance(seed, torch.Generator):
        return seed
    gen = torch.Generator()
    gen.manual_seed(0 if seed is None else int(seed))
    return gen
