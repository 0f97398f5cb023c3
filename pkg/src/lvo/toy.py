"""Desk-scale latent diffusion model implementing the adapter contract.

A small VAE maps 3x32x32 images to standardized 4x8x8 latents; a small
convolutional encoder-decoder with one attention-style token-mixing layer
(``"attn"``, the designated hook target) predicts noise.  Conditioning is an
integer class label; label ``n_classes`` is the null (unconditional) label.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from lvo.diffusion import DenoiserModel, SchedulerTable, VaeCodec, build_scheduler

CHECKPOINT_FORMAT = "lvo-checkpoint/1"
HOOK_LAYER = "attn"


def bundled_checkpoint_dir() -> Path:
    """Location of the pre-trained toy checkpoint shipped with the package."""
    return Path(str(resources.files("lvo") / "checkpoints" / "toy"))


class ToyVae(VaeCodec):
    def __init__(self, latent_channels: int = 4, hidden: int = 32):
        super().__init__()
        self.enc = nn.Sequential(
            nn.Conv2d(3, hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, 2 * hidden, 3, stride=2, padding=1), nn.SiLU(),
            nn.Conv2d(2 * hidden, 2 * latent_channels, 1),
        )
        self.dec = nn.Sequential(
            nn.Conv2d(latent_channels, 2 * hidden, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(2 * hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Upsample(scale_factor=2, mode="nearest"),
            nn.Conv2d(hidden, hidden, 3, padding=1), nn.SiLU(),
            nn.Conv2d(hidden, 3, 3, padding=1),
        )
        self.latent_channels = latent_channels
        self.hidden = hidden
        self.register_buffer("shift", torch.zeros(()))
        self.register_buffer("scale", torch.ones(()))
        self.reconstruction_bound = float("inf")

    def moments(self, images):
        mu, logvar = self.enc(images).chunk(2, dim=1)
        return mu, logvar.clamp(-10, 10)

    def encode(self, images: torch.Tensor) -> torch.Tensor:
        single = images.ndim == 3
        x = images.unsqueeze(0) if single else images
        mu, _ = self.moments(x.to(self.shift.dtype))
        z = (mu - self.shift) / self.scale
        return z[0] if single else z

    def decode_raw(self, raw):
        return torch.sigmoid(self.dec(raw))

    def decode(self, latents: torch.Tensor) -> torch.Tensor:
        single = latents.ndim == 3
        z = latents.unsqueeze(0) if single else latents
        img = self.decode_raw(z * self.scale + self.shift)
        return img[0] if single else img


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 1000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=-1)


class _DownBlock(nn.Module):
    def __init__(self, c_in, c_out, emb_dim):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.conv2 = nn.Conv2d(c_out, c_out, 3, padding=1)

    def forward(self, x, emb):
        h = F.silu(self.conv(x) + self.emb(emb)[:, :, None, None])
        return F.silu(self.conv2(h))


class TokenMixer(nn.Module):
    """Single-head self-attention over spatial tokens; output is ``(B, N, C)``."""

    def __init__(self, width: int, emb_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, num_heads=1, batch_first=True)
        self.emb = nn.Linear(emb_dim, width)
        self.mlp = nn.Sequential(nn.LayerNorm(width), nn.Linear(width, 2 * width), nn.SiLU(),
                                 nn.Linear(2 * width, width))

    def forward(self, x, emb):
        tokens = x.flatten(2).transpose(1, 2) + self.emb(emb)[:, None, :]
        h = self.norm(tokens)
        tokens = tokens + self.attn(h, h, h, need_weights=False)[0]
        return tokens + self.mlp(tokens)


class _UpBlock(nn.Module):
    def __init__(self, c_in, c_skip, c_out, emb_dim):
        super().__init__()
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1)
        self.emb = nn.Linear(emb_dim, c_out)
        self.conv2 = nn.Conv2d(c_out + c_skip, c_out, 3, padding=1)

    def forward(self, x, skip, emb):
        h = F.interpolate(x, scale_factor=2, mode="nearest")
        h = F.silu(self.conv(h) + self.emb(emb)[:, :, None, None])
        return F.silu(self.conv2(torch.cat([h, skip], dim=1)))


class ToyDenoiser(DenoiserModel):
    def __init__(self, latent_channels: int = 4, latent_size: int = 8, width: int = 32,
                 attn_width: int = 64, emb_dim: int = 64, n_classes: int = 4):
        super().__init__()
        self.latent_shape = (latent_channels, latent_size, latent_size)
        self.n_classes = n_classes
        self.emb_dim = emb_dim
        self.time_mlp = nn.Sequential(nn.Linear(emb_dim, emb_dim), nn.SiLU(), nn.Linear(emb_dim, emb_dim))
        self.class_emb = nn.Embedding(n_classes + 1, emb_dim)
        self.in_conv = nn.Conv2d(latent_channels, width, 3, padding=1)
        self.down = _DownBlock(width, attn_width, emb_dim)
        self.attn = TokenMixer(attn_width, emb_dim)
        self.up = _UpBlock(attn_width, width, width, emb_dim)
        self.out = nn.Conv2d(width, latent_channels, 3, padding=1)
        self._widths = {"in_conv": width, "down": attn_width, HOOK_LAYER: attn_width, "up": width,
                        "out": latent_channels}

    def hook_points(self):
        return {"in_conv": self.in_conv, "down": self.down, HOOK_LAYER: self.attn, "up": self.up,
                "out": self.out}

    def layer_layout(self, layer_id):
        return "tokens" if layer_id == HOOK_LAYER else "spatial"

    def layer_width(self, layer_id):
        return self._widths[layer_id]

    @property
    def null_label(self) -> int:
        return self.n_classes

    def prepare_conditioning(self, conditioning, batch):
        if conditioning is None:
            conditioning = self.null_label
        labels = torch.as_tensor(conditioning, dtype=torch.long, device=self.class_emb.weight.device)
        if labels.ndim == 0:
            labels = labels.expand(batch)
        return labels

    def forward(self, z, t, cond):
        dtype = self.in_conv.weight.dtype
        emb = self.time_mlp(timestep_embedding(t, self.emb_dim).to(dtype)) + self.class_emb(cond)
        h0 = self.in_conv(z.to(dtype))
        h1 = self.down(h0, emb)
        tokens = self.attn(h1, emb)
        h2 = tokens.transpose(1, 2).reshape(h1.shape)
        h3 = self.up(h2, h0, emb)
        return self.out(h3)


@dataclass
class ToyRecipe:
    """Training recipe for the toy latent diffusion model."""

    vae_steps: int = 1500
    denoiser_steps: int = 4000
    batch_size: int = 64
    lr: float = 2e-3
    kl_weight: float = 1e-4
    cond_dropout: float = 0.2
    T: int = 100
    # linear betas rescaled by 1000 / T so the last step is close to pure noise
    beta_start: float = 1e-3
    beta_end: float = 0.2
    seed: int = 0
    eval_images: int = 64
    n_images: int = 512
    sae_dict_size: int = 256
    sae_k: int = 16
    sae_epochs: int = 8


@dataclass
class ToyLdm:
    """VAE codec, denoiser, and noise schedule bundled with their manifest."""

    vae: ToyVae
    denoiser: ToyDenoiser
    scheduler: SchedulerTable
    info: dict = field(default_factory=dict)

    @property
    def hook_layer(self) -> str:
        return HOOK_LAYER

    def manifest(self) -> dict:
        d = self.denoiser
        return {
            "format": CHECKPOINT_FORMAT,
            "backend": "toy",
            "layers": list(d.hook_points()),
            "layer_widths": {k: d.layer_width(k) for k in d.hook_points()},
            "layer_layouts": {k: d.layer_layout(k) for k in d.hook_points()},
            "hook_layer": HOOK_LAYER,
            "latent_shape": list(d.latent_shape),
            "image_shape": [3, 4 * d.latent_shape[1], 4 * d.latent_shape[2]],
            "scheduler": self.scheduler.to_dict(),
            "conditioning": {"type": d.conditioning_type, "n_classes": d.n_classes,
                             "null_label": d.null_label},
            "architecture": {"width": d._widths["in_conv"], "attn_width": d._widths[HOOK_LAYER],
                             "emb_dim": d.emb_dim, "vae_hidden": self.vae.hidden},
            "vae": {"shift": float(self.vae.shift), "scale": float(self.vae.scale),
                    "reconstruction_mae": self.info.get("reconstruction_mae")},
            "training": self.info.get("training", {}),
        }

    def save(self, directory) -> Path:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.vae.state_dict(), directory / "vae.pt")
        torch.save(self.denoiser.state_dict(), directory / "denoiser.pt")
        (directory / "manifest.json").write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return directory

    @classmethod
    def load(cls, directory=None) -> "ToyLdm":
        directory = Path(directory) if directory is not None else bundled_checkpoint_dir()
        manifest_path = directory / "manifest.json"
        if not manifest_path.exists():
            raise FileNotFoundError(f"no checkpoint manifest at {manifest_path}")
        m = json.loads(manifest_path.read_text())
        if m.get("format") != CHECKPOINT_FORMAT or m.get("backend") != "toy":
            raise ValueError(f"{manifest_path} is not a toy checkpoint manifest")
        arch = m["architecture"]
        c, h, _ = m["latent_shape"]
        vae = ToyVae(latent_channels=c, hidden=arch.get("vae_hidden", 32))
        den = ToyDenoiser(latent_channels=c, latent_size=h, width=arch["width"],
                          attn_width=arch["attn_width"], emb_dim=arch["emb_dim"],
                          n_classes=m["conditioning"]["n_classes"])
        vae.load_state_dict(torch.load(directory / "vae.pt", weights_only=True))
        den.load_state_dict(torch.load(directory / "denoiser.pt", weights_only=True))
        sch = m["scheduler"]
        scheduler = build_scheduler(sch["T"], sch["kind"], sch["beta_start"], sch["beta_end"])
        mae = m["vae"].get("reconstruction_mae")
        if mae is not None:
            vae.reconstruction_bound = float(mae)
        vae.eval()
        den.eval()
        for p in list(vae.parameters()) + list(den.parameters()):
            p.requires_grad_(False)
        return cls(vae, den, scheduler, {"reconstruction_mae": mae, "training": m.get("training", {}),
                                         "directory": str(directory)})

    def to(self, dtype=None, device=None) -> "ToyLdm":
        self.vae.to(device=device, dtype=dtype)
        self.denoiser.to(device=device, dtype=dtype)
        return self


def reconstruction_mae(vae: ToyVae, images: torch.Tensor) -> float:
    with torch.no_grad():
        return float((vae.decode(vae.encode(images)) - images.to(vae.shift.dtype)).abs().mean())


def _batches(n, batch_size, gen, steps):
    for _ in range(steps):
        yield torch.randint(0, n, (batch_size,), generator=gen)


def train_toy(dataset, recipe: ToyRecipe | None = None, log=None) -> ToyLdm:
    """Train VAE then denoiser on ``dataset`` (needs ``images`` and ``labels``)."""
    recipe = recipe or ToyRecipe()
    images, labels = dataset.images.float(), dataset.labels
    if len(images) == 0:
        raise ValueError("cannot train on an empty dataset")
    torch.manual_seed(recipe.seed)
    gen = torch.Generator()
    gen.manual_seed(recipe.seed)
    start = time.time()

    vae = ToyVae()
    opt = torch.optim.Adam(vae.parameters(), lr=recipe.lr)
    for step, idx in enumerate(_batches(len(images), recipe.batch_size, gen, recipe.vae_steps)):
        x = images[idx]
        mu, logvar = vae.moments(x)
        raw = mu + torch.exp(0.5 * logvar) * torch.randn(mu.shape, generator=gen)
        recon = F.mse_loss(vae.decode_raw(raw), x)
        kl = 0.5 * (mu ** 2 + logvar.exp() - 1 - logvar).mean()
        loss = recon + recipe.kl_weight * kl
        opt.zero_grad()
        loss.backward()
        opt.step()
        if log and step % 500 == 0:
            log(f"vae step {step}: recon {recon.item():.5f}")
    with torch.no_grad():
        mu, _ = vae.moments(images)
        vae.shift.fill_(float(mu.mean()))
        vae.scale.fill_(float(mu.std()))
        latents = vae.encode(images)

    scheduler = build_scheduler(recipe.T, "linear", recipe.beta_start, recipe.beta_end)
    den = ToyDenoiser(n_classes=getattr(dataset, "n_classes", int(labels.max()) + 1))
    alpha_bar = torch.as_tensor(scheduler.alpha_bar, dtype=torch.float32)
    opt = torch.optim.Adam(den.parameters(), lr=recipe.lr)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, recipe.denoiser_steps)

    def denoise_loss(idx, t, noise, drop):
        z0 = latents[idx]
        ab = alpha_bar[t][:, None, None, None]
        zt = ab.sqrt() * z0 + (1 - ab).sqrt() * noise
        cond = torch.where(drop, torch.full_like(labels[idx], den.null_label), labels[idx])
        return F.mse_loss(den(zt, t, cond), noise)

    eval_gen = torch.Generator()
    eval_gen.manual_seed(recipe.seed + 1)
    n_eval = min(len(latents), recipe.eval_images)
    eval_args = (torch.arange(n_eval), torch.randint(0, recipe.T, (n_eval,), generator=eval_gen),
                 torch.randn((n_eval, *latents.shape[1:]), generator=eval_gen),
                 torch.zeros(n_eval, dtype=torch.bool))
    with torch.no_grad():
        initial_loss = float(denoise_loss(*eval_args))
    for step, idx in enumerate(_batches(len(latents), recipe.batch_size, gen, recipe.denoiser_steps)):
        t = torch.randint(0, recipe.T, (len(idx),), generator=gen)
        noise = torch.randn((len(idx), *latents.shape[1:]), generator=gen)
        drop = torch.rand(len(idx), generator=gen) < recipe.cond_dropout
        loss = denoise_loss(idx, t, noise, drop)
        opt.zero_grad()
        loss.backward()
        opt.step()
        sched.step()
        if log and step % 500 == 0:
            log(f"denoiser step {step}: loss {loss.item():.5f}")
    with torch.no_grad():
        final_loss = float(denoise_loss(*eval_args))

    vae.eval()
    den.eval()
    for p in list(vae.parameters()) + list(den.parameters()):
        p.requires_grad_(False)
    mae = reconstruction_mae(vae, images[: recipe.eval_images])
    vae.reconstruction_bound = mae
    info = {
        "reconstruction_mae": mae,
        "training": {"recipe": asdict(recipe), "initial_denoise_loss": initial_loss,
                     "final_denoise_loss": final_loss, "seconds": round(time.time() - start, 1),
                     "dataset": {"kind": "toy_shapes", "n": len(images),
                                 "seed": getattr(dataset, "seed", None)}},
    }
    return ToyLdm(vae, den, scheduler, info)



def collect_activations(ldm: ToyLdm, images: torch.Tensor, labels: torch.Tensor, per_image: int = 4,
                        seed: int = 0) -> torch.Tensor:
    """Hook-layer tokens ``(n_tokens, width)`` at random time-steps of noised dataset latents."""
    from lvo.diffusion import inject_schedule_noise, run_hooked, to_tokens

    gen = torch.Generator()
    gen.manual_seed(seed)
    den, layer = ldm.denoiser, ldm.hook_layer
    out = []
    with torch.no_grad():
        z0 = ldm.vae.encode(images)
        for _ in range(per_image):
            t = torch.randint(0, ldm.scheduler.T, (len(z0),), generator=gen)
            zt = torch.stack([inject_schedule_noise(z, int(ti), ldm.scheduler, gen) for z, ti in zip(z0, t)])
            _, cap = run_hooked(den, zt, t, labels, capture=[layer])
            out.append(to_tokens(cap[layer], den.layer_layout(layer)).reshape(-1, den.layer_width(layer)))
    return torch.cat(out)


def train_toy_bundle(directory, recipe: ToyRecipe | None = None, log=None) -> Path:
    """Train the toy model and an SAE on its hook layer; write both to ``directory``."""
    from lvo.data import ToyShapesDataset
    from lvo.sae import train_toy_sae

    recipe = recipe or ToyRecipe()
    dataset = ToyShapesDataset(n=recipe.n_images, seed=recipe.seed)
    ldm = train_toy(dataset, recipe, log=log)
    acts = collect_activations(ldm, dataset.images.float(), dataset.labels, seed=recipe.seed)
    sae, curve = train_toy_sae(acts, recipe.sae_dict_size, recipe.sae_k, recipe.sae_epochs,
                               random_state=recipe.seed, return_curve=True)
    if log:
        log(f"sae loss {curve[0]:.4f} -> {curve[-1]:.4f} on {len(acts)} tokens")
    ldm.info["training"]["sae"] = {"n_tokens": len(acts), "initial_loss": curve[0], "final_loss": curve[-1]}
    directory = ldm.save(directory)
    sae.save(directory, layer=ldm.hook_layer)
    return directory
