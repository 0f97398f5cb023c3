"""Feature targets, activation steering, and steered prior generation."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Literal

import numpy as np
import torch

from lvo._validation import as_tensor, check_int, check_nonneg
from lvo.diffusion import from_tokens, sample, to_tokens
from lvo.sae import _unwrap, feature_activation

DEFAULT_GAMMA = {"raw": 50.0, "sae": 500.0}
TIMESTEP_MODES = ("active_timesteps", "all_timesteps")


@dataclass(frozen=True)
class FeatureTarget:
    """A raw channel of a layer, or a feature of the SAE trained on that layer."""

    kind: Literal["raw", "sae"]
    index: int
    layer_id: str

    def __post_init__(self):
        if self.kind not in ("raw", "sae"):
            raise ValueError(f"target kind must be 'raw' or 'sae', got {self.kind!r}")
        check_int(self.index, "index", minimum=0)

    @classmethod
    def raw(cls, channel: int, layer_id: str) -> "FeatureTarget":
        return cls("raw", channel, layer_id)

    @classmethod
    def sae(cls, feature: int, layer_id: str) -> "FeatureTarget":
        return cls("sae", feature, layer_id)

    def validate(self, width: int | None = None, sae=None):
        if self.kind == "sae":
            if sae is None:
                raise ValueError("an SAE feature target requires an SAE")
            limit = _unwrap(sae).dict_size
        else:
            if sae is not None:
                raise ValueError("a raw channel target must not be given an SAE")
            limit = width
        if limit is not None and self.index >= limit:
            raise IndexError(f"{self.kind} index {self.index} out of range [0, {limit})")
        return self

    def to_dict(self) -> dict:
        return {"kind": self.kind, "index": self.index, "layer_id": self.layer_id}


def target_activation(tokens: torch.Tensor, target: FeatureTarget, sae=None, reduce: str = "max"):
    """Aggregate the target's activation over tokens of ``(..., N, C)`` activations."""
    if target.kind == "sae":
        return feature_activation(sae, tokens, target.index, reduce=reduce)
    if target.index >= tokens.shape[-1]:
        raise IndexError(f"channel {target.index} out of range for width {tokens.shape[-1]}")
    ch = tokens[..., target.index]
    return ch.amax(dim=-1) if reduce == "max" else ch.mean(dim=-1)


@dataclass(frozen=True)
class SteeringSpec:
    """How strongly, and on which time-steps, to steer a target during sampling.

    ``activity`` and ``max_activation`` are per-time-step arrays from the
    analysis stage (activity frequency and dataset max of the target).
    """

    target: FeatureTarget
    gamma: float
    activity: np.ndarray
    max_activation: np.ndarray
    timestep_mode: str = "active_timesteps"

    def __post_init__(self):
        check_nonneg(self.gamma, "gamma")
        if self.timestep_mode not in TIMESTEP_MODES:
            raise ValueError(f"timestep_mode must be one of {TIMESTEP_MODES}, got {self.timestep_mode!r}")
        object.__setattr__(self, "activity", np.asarray(self.activity, dtype=np.float64))
        object.__setattr__(self, "max_activation", np.asarray(self.max_activation, dtype=np.float64))

    @classmethod
    def default_for(cls, target: FeatureTarget, activity, max_activation, **kw) -> "SteeringSpec":
        return cls(target, DEFAULT_GAMMA[target.kind], activity, max_activation, **kw)


def steering_coefficient(spec: SteeringSpec, t: int) -> float:
    """``gamma * max_x f_t(x)``; zero on inactive steps in ``active_timesteps`` mode."""
    t = int(t)
    table = spec.max_activation
    if not 0 <= t < len(table) or not np.isfinite(table[t]):
        raise KeyError(f"max-activation table has no entry for time-step {t}")
    if spec.timestep_mode == "active_timesteps":
        if not 0 <= t < len(spec.activity):
            raise KeyError(f"activity profile has no entry for time-step {t}")
        if spec.activity[t] == 0:
            return 0.0
    return spec.gamma * float(table[t])


def apply_steering(activations, spec: SteeringSpec, t: int, sae=None):
    """Add ``lambda * d_i`` to every token (SAE) or ``lambda`` to channel ``c`` (raw).

    ``activations`` are token-major ``(..., N, C)``.  With ``lambda == 0`` the
    input object is returned untouched.
    """
    target = spec.target
    if (target.kind == "sae") != (sae is not None):
        raise ValueError("an SAE must be supplied exactly when the target is an SAE feature")
    F = as_tensor(activations)
    lam = steering_coefficient(spec, t)
    if lam == 0:
        return activations
    if target.kind == "sae":
        s = _unwrap(sae)
        if F.shape[-1] != s.input_dim:
            raise ValueError(f"activation width {F.shape[-1]} does not match SAE input_dim {s.input_dim}")
        direction = s.directions[target.index].to(F.dtype)
    else:
        if target.index >= F.shape[-1]:
            raise ValueError(f"channel {target.index} out of range for width {F.shape[-1]}")
        direction = torch.zeros(F.shape[-1], dtype=F.dtype, device=F.device)
        direction[target.index] = 1.0
    return F + lam * direction


def make_steering_hook(model, spec: SteeringSpec, sae=None):
    """Per-time-step hook for :func:`lvo.diffusion.sample`; no edit where lambda is 0."""
    layer = spec.target.layer_id
    layout = model.layer_layout(layer)

    def hook(t):
        if steering_coefficient(spec, t) == 0:
            return None

        def edit(F):
            return from_tokens(apply_steering(to_tokens(F, layout), spec, t, sae), layout, F)

        return {layer: edit}

    return hook


def generate_prior(model, codec, scheduler, spec: SteeringSpec, conditioning=None, seed: int = 0, sae=None):
    """Sample with the target steered, then encode the image once.

    Returns ``(image, latent)`` where ``image`` is ``3 x H x W`` in [0, 1].
    """
    image = sample(model, scheduler, conditioning, seed, make_steering_hook(model, spec, sae), codec=codec)
    with torch.no_grad():
        latent = codec.encode(image.unsqueeze(0))[0]
    return image, latent
