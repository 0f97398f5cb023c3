"""Four-stage batch pipeline (analyze -> prior -> visualize -> evaluate) and sweeps.

Every stage writes a JSON manifest recording the hash of its resolved config,
the hashes of the artifacts it consumed, and the hashes of what it produced.
Later stages use those records to detect missing or stale inputs.
"""

from __future__ import annotations

import copy
import hashlib
import html
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources
from pathlib import Path

import numpy as np
import torch
import yaml
from PIL import Image

from lvo.activity import (
    ActivityAnalyzer,
    default_min_separation,
    read_peaks_json,
    read_profiles_csv,
    write_peaks_json,
    write_profiles_csv,
)
from lvo.data import load_dataset
from lvo.diffusion import inject_schedule_noise, run_hooked, to_tokens
from lvo.optimizer import LvoConfig, lvo_run
from lvo.regularization import RegularizerWeights
from lvo.sae import SparseAutoencoder
from lvo.steering import FeatureTarget, SteeringSpec, generate_prior, target_activation
from lvo.toy import ToyLdm, bundled_checkpoint_dir

log = logging.getLogger("lvo")

STAGES = ("analyze", "prior", "visualize", "evaluate")
NOISE_MODES = ("feature-dependent", "on", "off")


class PipelineError(RuntimeError):
    """A stage cannot run: missing checkpoint, missing upstream artifact, bad config."""


# ---------------------------------------------------------------------------
# configuration

def load_defaults() -> dict:
    text = (resources.files("lvo") / "configs" / "defaults.yaml").read_text()
    return yaml.safe_load(text)


def defaults_manifest() -> str:
    """Canonical JSON serialization of the shipped default profiles."""
    return json.dumps(load_defaults(), indent=2, sort_keys=True) + "\n"


@dataclass
class AnalyzeParams:
    k: int = 20
    p: int = 3
    min_separation: int | None = None
    stride: int = 1
    examples_per_peak: int = 5
    dataset: dict = field(default_factory=lambda: {"kind": "toy_shapes", "n": 64, "seed": 1})
    noise_seed: int = 0
    batch_size: int = 256


@dataclass
class PriorParams:
    gamma: float | None = None
    timestep_mode: str | None = None
    conditioning: int | None = None


@dataclass
class VisualizeParams:
    learning_rate: float | None = None
    steps: int | None = None
    schedule_noise: str | None = None
    weights: dict | None = None
    aggregation: str = "max"
    conditioning: int | None = None


@dataclass
class EvaluateParams:
    title: str = "Latent visualization report"


@dataclass
class SweepParams:
    parameter: str = "robustness"
    levels: list | str = "preset"
    features: list | None = None
    noise: list = field(default_factory=lambda: ["off", "on"])


def _from_mapping(cls, data):
    data = dict(data or {})
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise PipelineError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


@dataclass
class PipelineConfig:
    method: str = "sae"
    checkpoint: str = "bundled"
    sae_checkpoint: str = "bundled"
    out: str = "runs/lvo"
    features: list | dict = field(default_factory=lambda: {"first": 30})
    seeds: list = field(default_factory=lambda: [0, 1, 2, 3, 4])
    workers: int = 1
    analyze: AnalyzeParams = field(default_factory=AnalyzeParams)
    prior: PriorParams = field(default_factory=PriorParams)
    visualize: VisualizeParams = field(default_factory=VisualizeParams)
    evaluate: EvaluateParams = field(default_factory=EvaluateParams)
    sweep: SweepParams = field(default_factory=SweepParams)
    base_dir: str | None = field(default=None, compare=False)

    @classmethod
    def from_dict(cls, data: dict, base_dir=None) -> "PipelineConfig":
        data = dict(data or {})
        sections = {"analyze": AnalyzeParams, "prior": PriorParams, "visualize": VisualizeParams,
                    "evaluate": EvaluateParams, "sweep": SweepParams}
        kwargs = {name: _from_mapping(kind, data.pop(name, None)) for name, kind in sections.items()}
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise PipelineError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(**data, **kwargs)
        cfg.base_dir = str(base_dir) if base_dir is not None else None
        return cfg.resolve()

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        path = Path(path)
        if not path.exists():
            raise PipelineError(f"config file not found: {path}")
        return cls.from_dict(yaml.safe_load(path.read_text()) or {}, base_dir=path.parent)

    def resolve(self) -> "PipelineConfig":
        """Fill unset prior/visualize fields from the method's default profile."""
        if self.method not in ("raw", "sae"):
            raise PipelineError(f"method must be 'raw' or 'sae', got {self.method!r}")
        prof = load_defaults()[self.method]
        pr, vz = self.prior, self.visualize
        if pr.gamma is None:
            pr.gamma = float(prof["prior"]["gamma"])
        if pr.timestep_mode is None:
            pr.timestep_mode = prof["prior"]["timestep_mode"]
        if vz.learning_rate is None:
            vz.learning_rate = float(prof["visualize"]["learning_rate"])
        if vz.steps is None:
            vz.steps = int(prof["visualize"]["steps"])
        if vz.schedule_noise is None:
            vz.schedule_noise = prof["visualize"]["schedule_noise"]
        if vz.schedule_noise not in NOISE_MODES:
            raise PipelineError(f"schedule_noise must be one of {NOISE_MODES}, got {vz.schedule_noise!r}")
        weights = dict(prof["visualize"]["weights"])
        weights.update(vz.weights or {})
        vz.weights = RegularizerWeights.from_dict(weights).to_dict()
        if pr.gamma < 0:
            raise PipelineError("prior.gamma must be >= 0")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("base_dir")
        return d

    @property
    def out_dir(self) -> Path:
        p = Path(self.out)
        if not p.is_absolute() and self.base_dir is not None:
            p = Path(self.base_dir) / p
        return p

    def stage_hash(self, stage: str) -> str:
        """Hash of the settings that determine a stage's outputs."""
        d = self.to_dict()
        common = {k: d[k] for k in ("method", "checkpoint", "sae_checkpoint", "features", "seeds")}
        upstream = {"analyze": ["analyze"], "prior": ["analyze", "prior"],
                    "visualize": ["analyze", "prior", "visualize"],
                    "evaluate": ["analyze", "prior", "visualize", "evaluate"],
                    "sweep": ["analyze", "prior", "visualize", "sweep"]}[stage]
        payload = {"common": common, **{s: d[s] for s in upstream}}
        return sha256_bytes(json.dumps(payload, sort_keys=True, default=str).encode())

    def weights(self) -> RegularizerWeights:
        return RegularizerWeights.from_dict(self.visualize.weights)

    def noise_conditions(self) -> list[bool]:
        return {"feature-dependent": [False, True], "on": [True], "off": [False]}[self.visualize.schedule_noise]


def parse_features(spec) -> list[int] | dict:
    """``"first:6"`` / ``"0,3,5"`` / list / ``{"first": n}`` -> normalized form."""
    if isinstance(spec, dict):
        return {"first": int(spec["first"])}
    if isinstance(spec, str):
        if spec.startswith("first:"):
            return {"first": int(spec.split(":", 1)[1])}
        return [int(s) for s in spec.split(",") if s.strip()]
    return [int(s) for s in spec]


def select_features(spec, n_available: int) -> list[int]:
    spec = parse_features(spec)
    if isinstance(spec, dict):
        return list(range(min(spec["first"], n_available)))
    bad = [f for f in spec if not 0 <= f < n_available]
    if bad:
        raise PipelineError(f"feature ids out of range [0, {n_available}): {bad}")
    return spec


# ---------------------------------------------------------------------------
# artifacts and hashing

def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path) -> str:
    return sha256_bytes(Path(path).read_bytes())


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


def _json_default(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"not JSON serializable: {type(o)}")


def save_image(image: torch.Tensor, path: Path, upscale: int = 4) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    arr = (image.detach().clamp(0, 1).permute(1, 2, 0).cpu().numpy() * 255).round().astype(np.uint8)
    img = Image.fromarray(arr)
    if upscale > 1:
        img = img.resize((img.width * upscale, img.height * upscale), Image.NEAREST)
    img.save(path, format="PNG")
    return path


def save_latent(latent: torch.Tensor, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    np.save(path, latent.detach().cpu().numpy().astype(np.float32))
    return path


def _rel(path: Path, root: Path) -> str:
    return str(Path(path).relative_to(root))


def _outputs_record(paths, root: Path) -> dict:
    return {_rel(p, root): sha256_file(p) for p in sorted(paths)}


def _read_manifest(path: Path, stage_name: str) -> dict:
    if not path.exists():
        raise PipelineError(f"missing {stage_name} artifact: {path}")
    return json.loads(path.read_text())


def _resolve_path(cfg: PipelineConfig, value: str) -> Path:
    p = Path(value)
    if not p.is_absolute() and cfg.base_dir is not None:
        p = Path(cfg.base_dir) / p
    return p


def load_backend(cfg: PipelineConfig):
    """Load the model bundle (and SAE for the ``sae`` method) named in the config."""
    ckpt = bundled_checkpoint_dir() if cfg.checkpoint == "bundled" else _resolve_path(cfg, cfg.checkpoint)
    if not (ckpt / "manifest.json").exists():
        raise PipelineError(f"missing model checkpoint: {ckpt / 'manifest.json'}")
    ldm = ToyLdm.load(ckpt)
    sae = None
    sae_dir = None
    if cfg.method == "sae":
        sae_dir = bundled_checkpoint_dir() if cfg.sae_checkpoint == "bundled" else _resolve_path(cfg, cfg.sae_checkpoint)
        if not (sae_dir / "sae.json").exists():
            raise PipelineError(f"missing SAE checkpoint: {sae_dir / 'sae.json'}")
        sae = SparseAutoencoder.load(sae_dir)
    hashes = {f"checkpoint/{p.name}": sha256_file(p) for p in sorted(ckpt.glob("*")) if p.is_file()}
    if sae_dir is not None:
        hashes.update({f"sae/{p.name}": sha256_file(p) for p in sorted(sae_dir.glob("sae.*"))})
    return ldm, sae, hashes


def n_targets(ldm: ToyLdm, sae, method: str) -> int:
    return sae.dict_size if method == "sae" else ldm.denoiser.layer_width(ldm.hook_layer)


def make_target(cfg: PipelineConfig, ldm: ToyLdm, feature: int) -> FeatureTarget:
    return FeatureTarget(cfg.method, int(feature), ldm.hook_layer)


def _run_units(fn, units, workers: int):
    if workers <= 1:
        return [fn(u) for u in units]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, units))


# ---------------------------------------------------------------------------
# stage: analyze

def sweep_activations(ldm: ToyLdm, sae, method: str, dataset, timesteps, noise_seed: int = 0,
                      batch_size: int = 256) -> np.ndarray:
    """Aggregated activation of every target, ``(n_samples, T, n_targets)``; NaN where unrecorded."""
    model, layer = ldm.denoiser, ldm.hook_layer
    images = torch.stack([dataset[i].image for i in range(len(dataset))])
    labels = torch.as_tensor([dataset[i].label for i in range(len(dataset))])
    with torch.no_grad():
        z0 = ldm.vae.encode(images)
    n, T = len(images), ldm.scheduler.T
    X = np.full((n, T, n_targets(ldm, sae, method)), np.nan)
    gen = torch.Generator()
    gen.manual_seed(noise_seed)
    with torch.no_grad():
        for t in timesteps:
            zt = inject_schedule_noise(z0, t, ldm.scheduler, gen)
            for start in range(0, n, batch_size):
                sl = slice(start, start + batch_size)
                tt = torch.full((len(zt[sl]),), t, dtype=torch.long)
                _, cap = run_hooked(model, zt[sl], tt, labels[sl], capture=[layer])
                tokens = to_tokens(cap[layer], model.layer_layout(layer))
                if method == "sae":
                    feats = sae.encode(tokens).amax(dim=1)
                else:
                    feats = tokens.amax(dim=1)
                X[sl, t, :] = feats.double().numpy()
    return X


def stage_analyze(cfg: PipelineConfig) -> dict:
    ap = cfg.analyze
    ldm, sae, ckpt_hashes = load_backend(cfg)
    dataset = load_dataset(ap.dataset)
    if len(dataset) == 0:
        raise PipelineError("analysis dataset is empty")
    T = ldm.scheduler.T
    timesteps = list(range(0, T, ap.stride))
    X = sweep_activations(ldm, sae, cfg.method, dataset, timesteps, ap.noise_seed, ap.batch_size)
    sep = ap.min_separation if ap.min_separation is not None else default_min_separation(T)
    analyzer = ActivityAnalyzer(k=ap.k, p=ap.p, min_separation=sep).fit(X)
    features = select_features(cfg.features, X.shape[2])

    root = cfg.out_dir
    pdir = root / "profiles"
    pdir.mkdir(parents=True, exist_ok=True)
    outputs = [write_profiles_csv(analyzer.profiles_, pdir / "profiles.csv")]
    outputs.append(write_peaks_json(analyzer.peaks_, pdir / "peaks.json", k=ap.k, p=ap.p, min_separation=sep,
                                    T=T))
    max_path = pdir / "max_activation.csv"
    with max_path.open("w") as fh:
        fh.write("feature_id,t,max_activation\n")
        for f in range(X.shape[2]):
            for t in range(T):
                fh.write(f"{f},{t},{float(analyzer.max_activation_[f, t])!r}\n")
    outputs.append(max_path)

    examples = {}
    sample_ids = set()
    for f in features:
        per_peak = {}
        for t in analyzer.peaks_[f].timesteps:
            ranked = [(sid, act) for sid, act in analyzer.top_examples(f, t, ap.examples_per_peak) if act > 0]
            per_peak[str(t)] = [{"sample_id": sid, "activation": act, "prompt": dataset[sid].prompt}
                                for sid, act in ranked]
            sample_ids.update(sid for sid, _ in ranked)
        examples[str(f)] = per_peak
    outputs.append(_write_json(pdir / "examples.json", examples))
    for sid in sorted(sample_ids):
        outputs.append(save_image(dataset[sid].image, pdir / "examples" / f"sample_{sid:05d}.png"))

    manifest = {
        "stage": "analyze", "config_hash": cfg.stage_hash("analyze"), "config": cfg.to_dict(),
        "inputs": ckpt_hashes, "features": features, "T": T, "n_targets": X.shape[2],
        "outputs": _outputs_record(outputs, root),
    }
    _write_json(pdir / "manifest.json", manifest)
    never = [f for f in features if not analyzer.peaks_[f].timesteps]
    if never:
        log.info("features never active: %s", never)
    return manifest


# ---------------------------------------------------------------------------
# stage: prior

def _load_analysis(root: Path):
    pdir = root / "profiles"
    manifest = _read_manifest(pdir / "manifest.json", "analyze")
    for name in ("profiles.csv", "peaks.json", "max_activation.csv", "examples.json"):
        if not (pdir / name).exists():
            raise PipelineError(f"missing analyze artifact: {pdir / name}")
    profiles = read_profiles_csv(pdir / "profiles.csv")
    peaks = read_peaks_json(pdir / "peaks.json")
    max_act = np.full((manifest["n_targets"], manifest["T"]), np.nan)
    with (pdir / "max_activation.csv").open() as fh:
        next(fh)
        for line in fh:
            f, t, v = line.strip().split(",")
            max_act[int(f), int(t)] = float(v)
    examples = json.loads((pdir / "examples.json").read_text())
    return manifest, profiles, peaks, max_act, examples


def _input_hashes(root: Path, manifest: dict, manifest_path: Path) -> dict:
    rec = {_rel(manifest_path, root): sha256_file(manifest_path)}
    rec.update(manifest["outputs"])
    return rec


def stage_prior(cfg: PipelineConfig) -> dict:
    root = cfg.out_dir
    amanifest, profiles, _, max_act, _ = _load_analysis(root)
    ldm, sae, ckpt_hashes = load_backend(cfg)
    features = select_features(cfg.features, amanifest["n_targets"])
    pr = cfg.prior

    def unit(args):
        f, seed = args
        target = make_target(cfg, ldm, f)
        spec = SteeringSpec(target, pr.gamma, profiles.frequency[f], max_act[f], pr.timestep_mode)
        image, latent = generate_prior(ldm.denoiser, ldm.vae, ldm.scheduler, spec, pr.conditioning, seed, sae)
        fdir = root / "priors" / f"feature_{f:05d}"
        img_path = save_image(image, fdir / f"seed_{seed}.png")
        lat_path = save_latent(latent, fdir / f"seed_{seed}.npy")
        return {"feature": f, "seed": seed, "gamma": pr.gamma, "timestep_mode": pr.timestep_mode,
                "target": target.to_dict(), "image": _rel(img_path, root), "latent": _rel(lat_path, root),
                "steered_timesteps": int(sum(1 for t in range(len(max_act[f]))
                                             if pr.timestep_mode == "all_timesteps" or profiles.frequency[f, t] > 0))}

    units = [(f, int(s)) for f in features for s in cfg.seeds]
    entries = _run_units(unit, units, cfg.workers)
    outputs = [root / e[k] for e in entries for k in ("image", "latent")]
    manifest = {
        "stage": "prior", "config_hash": cfg.stage_hash("prior"), "config": cfg.to_dict(),
        "inputs": {**ckpt_hashes, **_input_hashes(root, amanifest, root / "profiles" / "manifest.json")},
        "priors": entries, "outputs": _outputs_record(outputs, root),
    }
    _write_json(root / "priors" / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# stage: visualize

def _load_priors(root: Path, features, seeds):
    manifest = _read_manifest(root / "priors" / "manifest.json", "prior")
    table = {(e["feature"], e["seed"]): e for e in manifest["priors"]}
    priors = {}
    for f in features:
        for s in seeds:
            e = table.get((f, int(s)))
            if e is None or not (root / e["latent"]).exists():
                raise PipelineError(f"missing prior artifact for feature {f}, seed {s}")
            priors[(f, int(s))] = torch.from_numpy(np.load(root / e["latent"]))
    return manifest, priors


def _lvo_config(cfg: PipelineConfig, target, t, seed, noise, weights=None) -> LvoConfig:
    vz = cfg.visualize
    return LvoConfig(target=target, timestep=int(t), learning_rate=float(vz.learning_rate), steps=int(vz.steps),
                     weights=weights or cfg.weights(), schedule_noise=noise, seed=int(seed),
                     conditioning=vz.conditioning, aggregation=vz.aggregation)


def _save_result(result, path_stem: Path, root: Path, extra: dict) -> dict:
    img = save_image(result.image, path_stem.with_suffix(".png"))
    lat = save_latent(result.latent, path_stem.with_suffix(".npy"))
    meta = {**result.metadata(), **extra, "image": _rel(img, root), "latent": _rel(lat, root)}
    meta_path = _write_json(path_stem.with_suffix(".json"), meta)
    return {**extra, "image": _rel(img, root), "latent": _rel(lat, root), "metadata": _rel(meta_path, root),
            "initial_activation": float(result.activation_trace[0]) if len(result.activation_trace) else None,
            "final_activation": result.final_activation}


def stage_visualize(cfg: PipelineConfig) -> dict:
    root = cfg.out_dir
    amanifest, _, peaks, _, _ = _load_analysis(root)
    features = select_features(cfg.features, amanifest["n_targets"])
    seeds = [int(s) for s in cfg.seeds]
    pmanifest, priors = _load_priors(root, features, seeds)
    ldm, sae, ckpt_hashes = load_backend(cfg)
    never_active = [f for f in features if not peaks[f].timesteps]
    for f in never_active:
        log.info("feature %d never active: no visualizations", f)

    def unit(args):
        f, t, seed, noise = args
        lcfg = _lvo_config(cfg, make_target(cfg, ldm, f), t, seed, noise)
        result = lvo_run(ldm.denoiser, ldm.vae, sae, lcfg, priors[(f, seed)], ldm.scheduler,
                         prior_ref=f"priors/feature_{f:05d}/seed_{seed}.npy")
        tag = "on" if noise else "off"
        stem = root / "visualizations" / f"feature_{f:05d}" / f"t{t:04d}_seed{seed}_noise-{tag}"
        return _save_result(result, stem, root, {"feature": f, "timestep": t, "seed": seed, "noise": tag})

    units = [(f, t, s, noise) for f in features for t in peaks[f].timesteps for s in seeds
             for noise in cfg.noise_conditions()]
    entries = _run_units(unit, units, cfg.workers)
    outputs = [root / e[k] for e in entries for k in ("image", "latent", "metadata")]
    manifest = {
        "stage": "visualize", "config_hash": cfg.stage_hash("visualize"), "config": cfg.to_dict(),
        "inputs": {**ckpt_hashes, **_input_hashes(root, pmanifest, root / "priors" / "manifest.json")},
        "results": entries, "never_active": never_active, "outputs": _outputs_record(outputs, root),
    }
    _write_json(root / "visualizations" / "manifest.json", manifest)
    return manifest


# ---------------------------------------------------------------------------
# stage: evaluate

def _check_outputs(root: Path, manifest: dict, warnings: list):
    for rel, digest in manifest.get("outputs", {}).items():
        p = root / rel
        if not p.exists():
            warnings.append(f"missing artifact: {rel}")
        elif sha256_file(p) != digest:
            warnings.append(f"stale artifact (hash mismatch): {rel}")


def _check_inputs(root: Path, manifest: dict, warnings: list, stage: str):
    for rel, digest in manifest.get("inputs", {}).items():
        if rel.startswith(("checkpoint/", "sae/")):
            continue
        p = root / rel
        if not p.exists():
            warnings.append(f"{stage}: input missing: {rel}")
        elif sha256_file(p) != digest:
            warnings.append(f"{stage}: input changed since it was consumed: {rel}")


def _plot_feature(profiles, max_act, peaks, f, path: Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 2.4))
    t = np.arange(profiles.T)
    axes[0].plot(t, profiles.frequency[f], lw=1)
    for p in peaks[f].timesteps:
        axes[0].axvline(p, color="tab:red", lw=0.8, ls="--")
    axes[0].set_title(f"feature {f}: activity")
    axes[0].set_xlabel("time-step")
    axes[1].plot(t, max_act[f], lw=1, color="tab:orange")
    axes[1].set_title(f"feature {f}: max activation")
    axes[1].set_xlabel("time-step")
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=80, metadata={"Software": None})
    plt.close(fig)
    return path


def stage_evaluate(cfg: PipelineConfig) -> tuple[Path, list[str]]:
    """Write the HTML report; returns its path and the list of warnings."""
    root = cfg.out_dir
    warnings: list[str] = []
    manifests = {}
    for stage, rel in (("analyze", "profiles/manifest.json"), ("prior", "priors/manifest.json"),
                       ("visualize", "visualizations/manifest.json")):
        p = root / rel
        if p.exists():
            manifests[stage] = json.loads(p.read_text())
            _check_outputs(root, manifests[stage], warnings)
            _check_inputs(root, manifests[stage], warnings, stage)
        else:
            warnings.append(f"missing {stage} manifest: {rel}")
    if "analyze" not in manifests:
        raise PipelineError("cannot evaluate without analyze outputs")
    for stage, m in manifests.items():
        if m["config_hash"] != cfg.stage_hash(stage):
            warnings.append(f"stale {stage} outputs: config changed since the stage ran")
    _, profiles, peaks, max_act, examples = _load_analysis(root)
    features = select_features(cfg.features, manifests["analyze"]["n_targets"])
    priors = {(e["feature"], e["seed"]): e for e in manifests.get("prior", {}).get("priors", [])}
    results = manifests.get("visualize", {}).get("results", [])
    by_cell: dict = {}
    for r in results:
        by_cell.setdefault((r["feature"], r["timestep"]), []).append(r)

    rdir = root / "reports"
    esc = html.escape
    hashes = {s: m["config_hash"] for s, m in manifests.items()}
    parts = [f"<!doctype html><html><head><meta charset='utf-8'><title>{esc(cfg.evaluate.title)}</title>",
             "<style>body{font-family:sans-serif} table{border-collapse:collapse} td,th{border:1px solid #ccc;"
             "padding:4px;vertical-align:top} img{image-rendering:pixelated;width:96px} .gap{color:#b00}"
             ".small{font-size:11px;color:#555}</style></head><body>",
             f"<h1>{esc(cfg.evaluate.title)}</h1>",
             f"<p>method: <b>{esc(cfg.method)}</b>; layer: <code>attn</code>; seeds: {cfg.seeds}</p>",
             "<h2>Provenance</h2><ul>"]
    parts += [f"<li>{esc(s)} config hash: <code>{h}</code></li>" for s, h in hashes.items()]
    parts.append("</ul><h2>Features</h2>")
    for f in features:
        for seed in cfg.seeds:
            if (f, int(seed)) not in priors:
                warnings.append(f"missing prior for feature {f}, seed {seed}")
    never = []
    rows = 0
    for f in features:
        plot = _plot_feature(profiles, max_act, peaks, f, rdir / "plots" / f"feature_{f:05d}.png")
        parts.append(f"<h3>Feature {f}</h3><img style='width:640px' src='{_rel(plot, rdir)}'>")
        if not peaks[f].timesteps:
            never.append(f)
            parts.append("<p>never active: no activity peaks, no visualizations</p>")
            continue
        parts.append("<table><tr><th>peak t</th><th>optimized visualizations</th>"
                     "<th>dataset examples</th><th>steered samples (priors)</th></tr>")
        for t in peaks[f].timesteps:
            rows += 1
            cells = sorted(by_cell.get((f, t), []), key=lambda r: (r["noise"], r["seed"]))
            if cells:
                viz = "".join(
                    f"<figure style='display:inline-block;margin:2px'><img src='../{esc(r['image'])}'>"
                    f"<figcaption class='small'>seed {r['seed']}, noise {r['noise']}<br>"
                    f"act {r['initial_activation']:.3g} &rarr; {r['final_activation']:.3g}</figcaption></figure>"
                    for r in cells)
            else:
                viz = "<span class='gap'>missing visualizations</span>"
                warnings.append(f"missing visualizations for feature {f} at t={t}")
            ex = examples.get(str(f), {}).get(str(t), [])
            if ex:
                exc = "".join(
                    f"<figure style='display:inline-block;margin:2px'>"
                    f"<img src='../profiles/examples/sample_{e['sample_id']:05d}.png'>"
                    f"<figcaption class='small'>{esc(e['prompt'])}<br>act {e['activation']:.3g}</figcaption>"
                    f"</figure>" for e in ex)
            else:
                exc = "<span class='gap'>no examples</span>"
            pri = []
            for s in cfg.seeds:
                e = priors.get((f, int(s)))
                if e is None:
                    pri.append(f"<span class='gap'>missing prior seed {s}</span>")
                else:
                    pri.append(f"<img src='../{esc(e['image'])}' title='seed {s}, gamma {e['gamma']}'>")
            parts.append(f"<tr class='peak-row' data-feature='{f}' data-t='{t}'><td>{t}</td><td>{viz}</td>"
                         f"<td>{exc}</td><td>{''.join(pri)}</td></tr>")
        parts.append("</table>")
    if warnings:
        parts.append("<h2>Warnings</h2><ul>" + "".join(f"<li class='gap'>{esc(w)}</li>" for w in warnings)
                     + "</ul>")
    parts.append("</body></html>\n")
    report = rdir / "report.html"
    report.parent.mkdir(parents=True, exist_ok=True)
    report.write_text("\n".join(parts))
    _write_json(rdir / "manifest.json", {
        "stage": "evaluate", "config_hash": cfg.stage_hash("evaluate"), "rows": rows, "never_active": never,
        "warnings": warnings, "upstream_config_hashes": hashes, "report": _rel(report, root)})
    return report, warnings


# ---------------------------------------------------------------------------
# sweeps

ROBUSTNESS_LEVELS = (
    {"jitter_px": 0, "rotation_deg": 0.0, "scale_factor": 1.0},
    {"jitter_px": 1, "rotation_deg": 5.0, "scale_factor": 1.1},
    {"jitter_px": 8, "rotation_deg": 15.0, "scale_factor": 1.2},
    {"jitter_px": 16, "rotation_deg": 45.0, "scale_factor": 1.8},
)
PENALTY_LEVELS = (0.0, 0.5, 1.0, 5.0)
PRESETS = {
    "robustness": ROBUSTNESS_LEVELS,
    "tv_weight": PENALTY_LEVELS,
    "range_weight": PENALTY_LEVELS,
    "moment_weight": PENALTY_LEVELS,
    "smoothing_sigma0": (0.0, 0.5, 1.0, 5.0),
    "spectral_filter": (False, True),
    "gamma": (1.0, 5.0, 10.0, 50.0, 100.0, 500.0, 1000.0),
    "learning_rate": (0.001, 0.01, 0.05, 0.1),
    "steps": (100, 200, 1000, 2000),
}
WEIGHT_PARAMS = {"tv_weight", "range_weight", "moment_weight", "smoothing_sigma0", "spectral_filter"}


@dataclass
class SweepPlan:
    """One parameter swept over ordered levels; everything else stays at the baseline."""

    parameter: str
    levels: list
    baseline: PipelineConfig
    features: list[int]
    noise_conditions: list[bool] = field(default_factory=lambda: [False, True])

    def __post_init__(self):
        if self.parameter not in PRESETS:
            raise PipelineError(f"unknown sweep parameter {self.parameter!r}; choose from {sorted(PRESETS)}")
        keys = [json.dumps(lv, sort_keys=True) for lv in self.levels]
        if len(set(keys)) != len(keys):
            raise PipelineError(f"duplicate sweep levels: {self.levels}")
        if not self.levels:
            raise PipelineError("a sweep needs at least one level")

    @classmethod
    def from_config(cls, cfg: PipelineConfig, features=None) -> "SweepPlan":
        sp = cfg.sweep
        levels = list(PRESETS.get(sp.parameter, ())) if sp.levels == "preset" else list(sp.levels)
        noise = {"off": False, "on": True}
        conds = [noise[n] for n in sp.noise] if isinstance(sp.noise, list) else cfg.noise_conditions()
        feats = features if features is not None else (sp.features if sp.features is not None else None)
        return cls(sp.parameter, levels, cfg, feats, conds)

    def cell_config(self, level) -> PipelineConfig:
        cfg = copy.deepcopy(self.baseline)
        if self.parameter == "robustness":
            cfg.visualize.weights = {**cfg.visualize.weights, **level}
        elif self.parameter in WEIGHT_PARAMS:
            cfg.visualize.weights = {**cfg.visualize.weights, self.parameter: level}
        elif self.parameter == "gamma":
            cfg.prior = replace(cfg.prior, gamma=float(level))
        else:
            setattr(cfg.visualize, self.parameter, level)
        RegularizerWeights.from_dict(cfg.visualize.weights)
        return cfg


def _flatten(d, prefix=""):
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out


def config_diff(a: PipelineConfig, b: PipelineConfig) -> dict:
    fa, fb = _flatten(a.to_dict()), _flatten(b.to_dict())
    return {k: [fa.get(k), fb.get(k)] for k in sorted(set(fa) | set(fb)) if fa.get(k) != fb.get(k)}


def _grid_image(rows, path: Path, cell=32, upscale=3):
    n_cols = max(len(r) for r in rows)
    canvas = Image.new("RGB", (n_cols * cell, len(rows) * cell), (255, 255, 255))
    for r, row in enumerate(rows):
        for c, p in enumerate(row):
            canvas.paste(Image.open(p).convert("RGB").resize((cell, cell), Image.NEAREST), (c * cell, r * cell))
    canvas = canvas.resize((canvas.width * upscale, canvas.height * upscale), Image.NEAREST)
    canvas.save(path, format="PNG")
    return path


def sweep_parameter_keys(parameter: str) -> set[str]:
    """Flattened config keys a sweep over ``parameter`` is allowed to change."""
    if parameter == "robustness":
        return {f"visualize.weights.{k}" for k in ROBUSTNESS_LEVELS[0]}
    if parameter in WEIGHT_PARAMS:
        return {f"visualize.weights.{parameter}"}
    if parameter == "gamma":
        return {"prior.gamma"}
    return {f"visualize.{parameter}"}


def run_sweep(plan: SweepPlan, out=None) -> dict:
    """Run every ``(level, feature, noise)`` cell and assemble a grid.

    Grid rows index levels; columns index ``(feature, noise condition)``.
    Each cell optimizes at the feature's top-ranked peak with the first seed.
    """
    base = plan.baseline
    root = base.out_dir
    amanifest, profiles, peaks, max_act, _ = _load_analysis(root)
    ldm, sae, _ = load_backend(base)
    features = plan.features if plan.features is not None else select_features(base.features, amanifest["n_targets"])
    seed = int(base.seeds[0])
    sdir = Path(out) if out is not None else root / "sweeps" / plan.parameter
    sdir.mkdir(parents=True, exist_ok=True)
    base_priors = None
    if plan.parameter != "gamma":
        _, base_priors = _load_priors(root, features, [seed])

    rows, grid_rows = [], []
    for li, level in enumerate(plan.levels):
        cfg = plan.cell_config(level)
        diff = config_diff(base, cfg)
        cells, grid_row = [], []
        for f in features:
            t = peaks[f].timesteps[0] if peaks[f].timesteps else int(np.argmax(profiles.frequency[f]))
            target = make_target(cfg, ldm, f)
            if base_priors is not None:
                prior = base_priors[(f, seed)]
            else:
                spec = SteeringSpec(target, cfg.prior.gamma, profiles.frequency[f], max_act[f],
                                    cfg.prior.timestep_mode)
                _, prior = generate_prior(ldm.denoiser, ldm.vae, ldm.scheduler, spec, cfg.prior.conditioning,
                                          seed, sae)
            for noise in plan.noise_conditions:
                result = lvo_run(ldm.denoiser, ldm.vae, sae, _lvo_config(cfg, target, t, seed, noise), prior,
                                 ldm.scheduler)
                tag = "on" if noise else "off"
                stem = sdir / f"level{li}_feature_{f:05d}_noise-{tag}"
                cells.append(_save_result(result, stem, sdir, {"feature": f, "noise": tag, "timestep": t,
                                                               "seed": seed}))
                grid_row.append(sdir / cells[-1]["image"])
        rows.append({"level": li, "value": level, "config_diff": diff, "cells": cells})
        grid_rows.append(grid_row)
    grid = _grid_image(grid_rows, sdir / "grid.png")
    manifest = {"parameter": plan.parameter, "levels": plan.levels, "features": features,
                "noise_conditions": ["on" if n else "off" for n in plan.noise_conditions],
                "baseline_config_hash": base.stage_hash("visualize"), "grid": _rel(grid, sdir),
                "layout": {"rows": "level", "columns": "feature x noise"}, "rows": rows}
    _write_json(sdir / "manifest.json", manifest)
    return manifest
