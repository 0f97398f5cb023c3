"""Latent diffusion model contract: scheduler, hooked denoiser, VAE codec, sampling.

Backends implement :class:`DenoiserModel` and :class:`VaeCodec`.  Activation
capture and editing go through ordinary ``torch`` forward hooks on the modules
returned by :meth:`DenoiserModel.hook_points`, so any ``nn.Module`` backend
can be attached without changes to the optimization code.
"""

from __future__ import annotations

import abc
import os
from collections.abc import Callable, Mapping, Sequence
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from lvo._validation import as_tensor, check_int

Edit = Callable[[torch.Tensor], torch.Tensor]
# Called once per sampling time-step; returns {layer_id: edit} or None.
SteeringHook = Callable[[int], "Mapping[str, Edit] | None"]


def default_device() -> torch.device:
    return torch.device(os.environ.get("LVO_DEVICE", "cpu"))


@dataclass(frozen=True)
class SchedulerTable:
    """Discrete noise schedule; time-steps are indexed ``0 .. T-1``."""

    betas: np.ndarray
    kind: str = "linear"
    beta_start: float = 1e-4
    beta_end: float = 0.02

    def __post_init__(self):
        betas = np.asarray(self.betas, dtype=np.float64)
        if betas.ndim != 1 or len(betas) < 1:
            raise ValueError("betas must be a non-empty 1-D array")
        if np.any(betas < 0) or np.any(betas >= 1):
            raise ValueError("betas must lie in [0, 1)")
        object.__setattr__(self, "betas", betas)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def check_timestep(self, t) -> int:
        t = int(t)
        if not 0 <= t < self.T:
            raise ValueError(f"time-step {t} out of range [0, {self.T})")
        return t

    def to_dict(self) -> dict:
        return {"T": self.T, "kind": self.kind, "beta_start": self.beta_start, "beta_end": self.beta_end}


def build_scheduler(T: int, schedule_kind: str = "linear", beta_start: float = 1e-4,
                    beta_end: float = 0.02) -> SchedulerTable:
    """DDPM schedule with betas spaced linearly in ``[beta_start, beta_end]``."""
    T = check_int(T, "T", minimum=1)
    if schedule_kind == "linear":
        betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    elif schedule_kind == "scaled_linear":
        betas = np.linspace(beta_start ** 0.5, beta_end ** 0.5, T, dtype=np.float64) ** 2
    else:
        raise ValueError(f"unknown schedule kind {schedule_kind!r}")
    return SchedulerTable(betas, kind=schedule_kind, beta_start=beta_start, beta_end=beta_end)


def inject_schedule_noise(z, t: int, scheduler: SchedulerTable, rng=None):
    """Re-noise a clean latent to the signal level expected at time-step ``t``.

    ``rng`` is a ``torch.Generator`` or a callable ``(shape, dtype) -> tensor``
    producing the standard-normal draw (handy for forcing ``eps``).
    """
    t = scheduler.check_timestep(t)
    tensor_in = isinstance(z, torch.Tensor)
    z = as_tensor(z)
    ab = float(scheduler.alpha_bar[t])
    if ab == 1.0:
        return z if tensor_in else z.numpy()
    if callable(rng):
        eps = as_tensor(rng(tuple(z.shape), z.dtype)).to(z.dtype)
    else:
        eps = torch.randn(z.shape, generator=rng, dtype=z.dtype).to(z.device)
    out = ab ** 0.5 * z + (1.0 - ab) ** 0.5 * eps
    return out if tensor_in else out.numpy()


class DenoiserModel(nn.Module, abc.ABC):
    """Noise-prediction network with named, hookable layers.

    Subclasses implement :meth:`forward` on batched latents and declare their
    hook points in forward order, ending with the output head.
    """

    conditioning_type: str = "class_label"
    latent_shape: tuple[int, int, int]

    @abc.abstractmethod
    def hook_points(self) -> "dict[str, nn.Module]":
        """Ordered mapping ``layer_id -> module`` in execution order."""

    @property
    def output_layer(self) -> str:
        return list(self.hook_points())[-1]

    def layer_layout(self, layer_id: str) -> str:
        """``"tokens"`` for ``(B, N, C)`` activations, ``"spatial"`` for ``(B, C, H, W)``."""
        return "spatial"

    def layer_width(self, layer_id: str) -> int:
        raise NotImplementedError

    def prepare_conditioning(self, conditioning, batch: int):
        return conditioning


class VaeCodec(nn.Module, abc.ABC):
    """Image <-> standardized latent codec."""

    # backend-declared bound on mean absolute round-trip error for in-distribution images
    reconstruction_bound: float = float("inf")

    @abc.abstractmethod
    def encode(self, images: torch.Tensor) -> torch.Tensor: ...

    @abc.abstractmethod
    def decode(self, latents: torch.Tensor) -> torch.Tensor: ...


def to_tokens(activations: torch.Tensor, layout: str) -> torch.Tensor:
    """View layer activations as ``(B, tokens, channels)``."""
    if layout == "tokens":
        return activations
    b, c = activations.shape[:2]
    return activations.reshape(b, c, -1).transpose(1, 2)


def from_tokens(tokens: torch.Tensor, layout: str, like: torch.Tensor) -> torch.Tensor:
    if layout == "tokens":
        return tokens
    return tokens.transpose(1, 2).reshape(like.shape)


def _resolve_layer(model: DenoiserModel, layer_id: str) -> nn.Module:
    points = model.hook_points()
    if layer_id not in points:
        raise KeyError(f"unknown layer {layer_id!r}; available layers: {', '.join(points)}")
    return points[layer_id]


def _batch(z, t, model):
    z = as_tensor(z)
    batched = z.ndim == 4
    if not batched:
        z = z.unsqueeze(0)
    t = torch.as_tensor(t, dtype=torch.long, device=z.device)
    if t.ndim == 0:
        t = t.expand(z.shape[0])
    return z, t, batched


def run_hooked(model: DenoiserModel, z, t, conditioning=None, *,
               edits: "Mapping[str, Edit] | None" = None,
               capture: Sequence[str] = ()):
    """Forward pass with optional per-layer edits and activation capture.

    Captured activations are the tensors downstream layers actually consume
    (i.e. after any edit), still attached to the autograd graph.
    Inputs and outputs are batched.
    """
    edits = dict(edits or {})
    out_layer = model.output_layer
    for layer_id in edits:
        _resolve_layer(model, layer_id)
        if layer_id == out_layer:
            raise ValueError(f"cannot edit the output head {layer_id!r}; edits must precede it")
    captured: dict[str, torch.Tensor] = {}
    handles = []

    def make_hook(layer_id):
        def hook(module, inputs, output):
            if layer_id in edits:
                edited = edits[layer_id](output)
                if not isinstance(edited, torch.Tensor) or edited.shape != output.shape:
                    got = tuple(edited.shape) if isinstance(edited, torch.Tensor) else type(edited)
                    raise ValueError(f"edit at {layer_id!r} changed activation shape "
                                     f"{tuple(output.shape)} -> {got}")
                output = edited
            if layer_id in capture:
                captured[layer_id] = output
            return output
        return hook

    try:
        for layer_id in set(edits) | set(capture):
            module = _resolve_layer(model, layer_id)
            handles.append(module.register_forward_hook(make_hook(layer_id)))
        cond = model.prepare_conditioning(conditioning, z.shape[0])
        pred = model(z, t, cond)
    finally:
        for h in handles:
            h.remove()
    return pred, captured


def forward_with_hook(model: DenoiserModel, z, t, conditioning, layer_id: str):
    """Return ``(prediction, activations at layer_id)`` from one forward pass.

    Unbatched ``C x H x W`` input yields unbatched outputs.
    """
    zb, tb, batched = _batch(z, t, model)
    pred, cap = run_hooked(model, zb, tb, conditioning, capture=[layer_id])
    act = cap[layer_id]
    return (pred, act) if batched else (pred[0], act[0])


def forward_with_edit(model: DenoiserModel, z, t, conditioning, layer_id: str, edit: Edit):
    """Prediction with the activations at ``layer_id`` replaced by ``edit(F)``."""
    zb, tb, batched = _batch(z, t, model)
    pred, _ = run_hooked(model, zb, tb, conditioning, edits={layer_id: edit})
    return pred if batched else pred[0]


def sample_latent(model: DenoiserModel, scheduler: SchedulerTable, conditioning=None, seed: int = 0,
                  steering_hook: "SteeringHook | None" = None, *, capture: Sequence[str] = (),
                  on_step: "Callable[[int, torch.Tensor, dict], None] | None" = None) -> torch.Tensor:
    """Ancestral DDPM sampling from pure noise; returns the final clean latent.

    A single generator seeded with ``seed`` provides the initial noise and the
    per-step noise, drawn in a fixed order so steering never shifts the stream.
    """
    gen = torch.Generator()
    gen.manual_seed(int(seed))
    param = next(model.parameters())
    dtype, device = param.dtype, param.device
    x = torch.randn((1, *model.latent_shape), generator=gen, dtype=dtype).to(device)
    betas = scheduler.betas
    alpha_bar = scheduler.alpha_bar
    with torch.no_grad():
        for t in range(scheduler.T - 1, -1, -1):
            edits = steering_hook(t) if steering_hook is not None else None
            eps, cap = run_hooked(model, x, torch.full((1,), t, dtype=torch.long, device=device),
                                  conditioning, edits=edits or None, capture=capture)
            if on_step is not None:
                on_step(t, x, cap)
            beta, ab = betas[t], alpha_bar[t]
            mean = (x - beta / np.sqrt(1.0 - ab) * eps) / np.sqrt(1.0 - beta)
            noise = torch.randn(x.shape, generator=gen, dtype=dtype).to(device)
            if t > 0:
                var = beta * (1.0 - alpha_bar[t - 1]) / (1.0 - ab)
                x = mean + float(np.sqrt(var)) * noise
            else:
                x = mean
    return x[0]


def sample(model: DenoiserModel, scheduler: SchedulerTable, conditioning=None, seed: int = 0,
           steering_hook: "SteeringHook | None" = None, *, codec: "VaeCodec | None" = None,
           **kwargs) -> torch.Tensor:
    """Sample an image (decoded through ``codec``) or, without a codec, a latent."""
    latent = sample_latent(model, scheduler, conditioning, seed, steering_hook, **kwargs)
    if codec is None:
        return latent
    with torch.no_grad():
        return codec.decode(latent.unsqueeze(0))[0]
