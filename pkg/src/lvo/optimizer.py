"""Gradient-ascent search for latents that maximally activate a target feature."""

from __future__ import annotations

from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, TransformerMixin

from lvo._validation import as_tensor, check_int, check_latent, check_random_state
from lvo.activity import PeakSet
from lvo.diffusion import inject_schedule_noise, run_hooked, to_tokens
from lvo.regularization import (
    RegularizerWeights,
    apply_random_transform,
    smooth_gradient,
    spectral_filter,
    total_penalty,
)
from lvo.steering import FeatureTarget, target_activation


class NonFiniteObjectiveError(FloatingPointError):
    def __init__(self, step, value):
        super().__init__(f"objective is not finite at step {step}: {value}")
        self.step = step


@dataclass(frozen=True)
class LvoConfig:
    target: FeatureTarget
    timestep: int
    learning_rate: float = 0.05
    steps: int = 100
    weights: RegularizerWeights = field(default_factory=RegularizerWeights)
    schedule_noise: bool = False
    seed: int = 0
    conditioning: int | None = None
    aggregation: str = "max"
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8

    def __post_init__(self):
        check_int(self.steps, "steps", minimum=0)
        check_int(self.timestep, "timestep", minimum=0)
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.aggregation not in ("max", "mean"):
            raise ValueError(f"aggregation must be 'max' or 'mean', got {self.aggregation!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["target"] = self.target.to_dict()
        d["weights"] = self.weights.to_dict()
        d["adam_betas"] = list(self.adam_betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "LvoConfig":
        d = dict(d)
        d["target"] = FeatureTarget(**d["target"])
        d["weights"] = RegularizerWeights.from_dict(d.get("weights", {}))
        if "adam_betas" in d:
            d["adam_betas"] = tuple(d["adam_betas"])
        return cls(**d)


@dataclass
class VisualizationResult:
    latent: torch.Tensor
    image: torch.Tensor
    activation_trace: np.ndarray
    penalty_trace: np.ndarray
    config: LvoConfig
    prior_ref: str | None = None

    @property
    def final_activation(self) -> float:
        return float(self.activation_trace[-1]) if len(self.activation_trace) else float("nan")

    def metadata(self) -> dict:
        return {"config": self.config.to_dict(), "prior": self.prior_ref,
                "activation_trace": [float(a) for a in self.activation_trace],
                "penalty_trace": [float(p) for p in self.penalty_trace]}


def _model_dtype(model):
    return next(model.parameters()).dtype


def objective_terms(z: torch.Tensor, model, sae, cfg: LvoConfig, rng: torch.Generator, scheduler=None):
    """Differentiable ``(score, activation, penalty)`` for one draw of transform and noise.

    Penalties act on the clean ``z``; the transform and schedule noise only
    shape what the denoiser sees.
    """
    z_seen, _ = apply_random_transform(z, cfg.weights, rng)
    if cfg.schedule_noise:
        if scheduler is None:
            raise ValueError("schedule noise requires a scheduler")
        z_seen = inject_schedule_noise(z_seen, cfg.timestep, scheduler, rng)
    t = torch.full((1,), cfg.timestep, dtype=torch.long)
    layer = cfg.target.layer_id
    _, cap = run_hooked(model, z_seen.unsqueeze(0), t, cfg.conditioning, capture=[layer])
    tokens = to_tokens(cap[layer], model.layer_layout(layer))[0]
    activation = target_activation(tokens, cfg.target, sae, reduce=cfg.aggregation)
    penalty = total_penalty(z, cfg.weights)
    return activation - penalty, activation, penalty


def objective(z, model, sae, cfg: LvoConfig, rng, scheduler=None, step: int | None = None):
    """Score ``activation - penalty`` and its gradient with respect to ``z``."""
    z = check_latent(z).detach().to(_model_dtype(model)).requires_grad_(True)
    score, _, _ = objective_terms(z, model, sae, cfg, check_random_state(rng), scheduler)
    if not torch.isfinite(score):
        raise NonFiniteObjectiveError(step, float(score))
    (grad,) = torch.autograd.grad(score, z)
    return float(score.detach()), grad


def condition_gradient(grad: torch.Tensor, weights: RegularizerWeights, step: int, total_steps: int):
    """Spectral filtering, then decaying Gaussian smoothing."""
    if weights.spectral_filter:
        grad = spectral_filter(grad)
    if weights.smoothing_sigma0 > 0:
        grad = smooth_gradient(grad, step, total_steps, weights.smoothing_sigma0)
    return grad


def lvo_run(model, codec, sae, cfg: LvoConfig, prior_latent, scheduler=None,
            prior_ref: str | None = None) -> VisualizationResult:
    """Optimize a latent from ``prior_latent`` for ``cfg.steps`` Adam ascent steps, then decode.

    One generator seeded with ``cfg.seed`` drives every transform and noise draw.
    """
    prior = check_latent(prior_latent, "prior_latent")
    if tuple(prior.shape) != tuple(model.latent_shape):
        raise ValueError(f"prior latent shape {tuple(prior.shape)} does not match model latent shape "
                         f"{tuple(model.latent_shape)}")
    cfg.target.validate(model.layer_width(cfg.target.layer_id) if cfg.target.kind == "raw" else None,
                        sae if cfg.target.kind == "sae" else None)
    if scheduler is not None:
        scheduler.check_timestep(cfg.timestep)
    z = prior.detach().clone().to(_model_dtype(model)).requires_grad_(True)
    opt = torch.optim.Adam([z], lr=cfg.learning_rate, betas=cfg.adam_betas, eps=cfg.adam_eps, maximize=True)
    gen = check_random_state(cfg.seed)
    activations, penalties = [], []
    for step in range(cfg.steps):
        score, act, pen = objective_terms(z, model, sae, cfg, gen, scheduler)
        if not torch.isfinite(score):
            raise NonFiniteObjectiveError(step, float(score.detach()))
        (grad,) = torch.autograd.grad(score, z)
        z.grad = condition_gradient(grad, cfg.weights, step, cfg.steps)
        opt.step()
        activations.append(float(act.detach()))
        penalties.append(float(pen.detach()) if torch.is_tensor(pen) else float(pen))
    latent = z.detach()
    with torch.no_grad():
        image = codec.decode(latent.unsqueeze(0))[0].clamp(0, 1) if codec is not None else None
    return VisualizationResult(latent, image, np.asarray(activations), np.asarray(penalties), cfg, prior_ref)


def run_per_peak(model, codec, sae, feature: FeatureTarget, peaks: PeakSet | Sequence[int],
                 priors: Mapping[int, torch.Tensor] | Sequence, cfg_template: LvoConfig,
                 scheduler=None) -> list[VisualizationResult]:
    """One independent run per ``(peak, prior seed)``; the optimization seed is the prior's seed."""
    timesteps = list(peaks.timesteps if isinstance(peaks, PeakSet) else peaks)
    if not isinstance(priors, Mapping):
        priors = dict(enumerate(priors))
    results = []
    for t in timesteps:
        for seed, latent in priors.items():
            cfg = replace(cfg_template, target=feature, timestep=int(t), seed=int(seed))
            results.append(lvo_run(model, codec, sae, cfg, latent, scheduler, prior_ref=f"seed={seed}"))
    return results


class LatentVisualizer(TransformerMixin, BaseEstimator):
    """Estimator front-end for :func:`lvo_run`.

    ``transform`` maps a stack of prior latents ``(n, C, H, W)`` to optimized
    latents of the same shape; the full :class:`VisualizationResult` objects
    are kept in ``results_``.  Prior ``i`` is optimized with seed ``seed + i``.
    """

    def __init__(self, model=None, codec=None, sae=None, scheduler=None, target=None, timestep=0,
                 learning_rate=0.05, steps=100, weights=None, schedule_noise=False, seed=0,
                 conditioning=None, aggregation="max"):
        self.model = model
        self.codec = codec
        self.sae = sae
        self.scheduler = scheduler
        self.target = target
        self.timestep = timestep
        self.learning_rate = learning_rate
        self.steps = steps
        self.weights = weights
        self.schedule_noise = schedule_noise
        self.seed = seed
        self.conditioning = conditioning
        self.aggregation = aggregation

    def _config(self, seed) -> LvoConfig:
        if self.target is None:
            raise ValueError("LatentVisualizer needs a target")
        weights = self.weights if self.weights is not None else (
            RegularizerWeights.sae_default() if self.target.kind == "sae" else RegularizerWeights.raw_default())
        return LvoConfig(self.target, self.timestep, self.learning_rate, self.steps, weights,
                         self.schedule_noise, seed, self.conditioning, self.aggregation)

    def fit(self, X=None, y=None):
        if self.model is None:
            raise ValueError("LatentVisualizer needs a model")
        self._config(self.seed)
        self.config_ = self._config(self.seed)
        return self

    def transform(self, X):
        X = as_tensor(X)
        if X.ndim == 3:
            X = X.unsqueeze(0)
        self.results_ = [lvo_run(self.model, self.codec, self.sae, self._config(self.seed + i), x,
                                 self.scheduler) for i, x in enumerate(X)]
        return torch.stack([r.latent for r in self.results_]).numpy()
