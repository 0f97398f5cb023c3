"""Top-k sparse autoencoder over hooked layer activations."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from lvo._validation import as_tensor, check_int

SAE_FORMAT = "lvo-sae/1"


class SparseAutoencoder(nn.Module):
    """Dictionary of ``dict_size`` unit-norm decoder directions over ``input_dim`` channels.

    Encoding subtracts the decoder bias, projects, keeps the ``k`` largest
    pre-activations per token (ties go to the lower feature index) and clamps
    at zero.
    """

    def __init__(self, input_dim: int, dict_size: int, k: int, generator: torch.Generator | None = None):
        super().__init__()
        check_int(input_dim, "input_dim", minimum=1)
        check_int(dict_size, "dict_size", minimum=1)
        check_int(k, "k", minimum=1)
        if k > dict_size:
            raise ValueError(f"k ({k}) must not exceed dict_size ({dict_size})")
        self.input_dim, self.dict_size, self.k = input_dim, dict_size, k
        w = torch.randn(dict_size, input_dim, generator=generator)
        w = w / w.norm(dim=1, keepdim=True)
        self.W_dec = nn.Parameter(w.clone())
        self.W_enc = nn.Parameter(w.clone())
        self.b_enc = nn.Parameter(torch.zeros(dict_size))
        self.b_dec = nn.Parameter(torch.zeros(input_dim))

    @property
    def directions(self) -> torch.Tensor:
        """Decoder directions, one unit-norm row per feature."""
        return self.W_dec

    def _check_width(self, x: torch.Tensor):
        if x.shape[-1] != self.input_dim:
            raise ValueError(f"activation width {x.shape[-1]} does not match SAE input_dim {self.input_dim}")

    def pre_activations(self, x: torch.Tensor) -> torch.Tensor:
        self._check_width(x)
        return (x.to(self.W_enc.dtype) - self.b_dec) @ self.W_enc.T + self.b_enc

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        pre = self.pre_activations(x)
        # stable descending sort keeps the lower index first among ties
        _, order = torch.sort(pre, dim=-1, descending=True, stable=True)
        idx = order[..., : self.k]
        vals = torch.gather(pre, -1, idx).clamp(min=0)
        return torch.zeros_like(pre).scatter(-1, idx, vals)

    def decode(self, codes: torch.Tensor) -> torch.Tensor:
        if codes.shape[-1] != self.dict_size:
            raise ValueError(f"code width {codes.shape[-1]} does not match dict_size {self.dict_size}")
        return codes.to(self.W_dec.dtype) @ self.W_dec + self.b_dec

    def forward(self, x):
        return self.decode(self.encode(x))

    @torch.no_grad()
    def normalize_decoder(self):
        self.W_dec.div_(self.W_dec.norm(dim=1, keepdim=True))

    def manifest(self, layer: str | None = None) -> dict:
        return {"format": SAE_FORMAT, "input_dim": self.input_dim, "dict_size": self.dict_size,
                "k_sae": self.k, "activation": "topk", "layer": layer}

    def save(self, directory, layer: str | None = None, name: str = "sae"):
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        torch.save(self.state_dict(), directory / f"{name}.pt")
        (directory / f"{name}.json").write_text(json.dumps(self.manifest(layer), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, directory, name: str = "sae") -> "SparseAutoencoder":
        directory = Path(directory)
        meta_path = directory / f"{name}.json"
        if not meta_path.exists():
            raise FileNotFoundError(f"no SAE manifest at {meta_path}")
        meta = json.loads(meta_path.read_text())
        if meta.get("activation", "topk") != "topk":
            raise ValueError(f"unsupported SAE activation rule {meta['activation']!r}")
        sae = cls(meta["input_dim"], meta["dict_size"], meta["k_sae"])
        sae.load_state_dict(torch.load(directory / f"{name}.pt", weights_only=True))
        sae.layer = meta.get("layer")
        for p in sae.parameters():
            p.requires_grad_(False)
        return sae


def _unwrap(sae) -> SparseAutoencoder:
    if isinstance(sae, TopKSAE):
        check_is_fitted(sae, "sae_")
        return sae.sae_
    return sae


def encode(sae, activations):
    """Sparse codes for ``(..., tokens, input_dim)`` activations."""
    return _unwrap(sae).encode(as_tensor(activations))


def decode(sae, codes):
    """Reconstruction ``b_dec + sum_i a_i d_i`` for each token."""
    return _unwrap(sae).decode(as_tensor(codes))


def feature_activation(sae, activations, index: int, reduce: str = "max"):
    """Scalar activation of feature ``index``: its code reduced over the token axis.

    ``activations`` is ``(tokens, input_dim)`` or batched ``(B, tokens, input_dim)``.
    """
    s = _unwrap(sae)
    if not 0 <= index < s.dict_size:
        raise IndexError(f"feature index {index} out of range [0, {s.dict_size})")
    codes = s.encode(as_tensor(activations))[..., index]
    return codes.amax(dim=-1) if reduce == "max" else codes.mean(dim=-1)


def train_toy_sae(activations, dict_size: int, k: int, epochs: int = 20, *, lr: float = 1e-3,
                  batch_size: int = 256, random_state: int = 0, return_curve: bool = False):
    """Fit a :class:`SparseAutoencoder` to ``(n_tokens, input_dim)`` activations by Adam on MSE.

    Decoder rows are renormalized to unit length after every step.
    """
    x = as_tensor(activations, torch.float32)
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("train_toy_sae needs a non-empty (n_tokens, input_dim) activation matrix")
    gen = torch.Generator()
    gen.manual_seed(random_state)
    sae = SparseAutoencoder(x.shape[1], dict_size, k, generator=gen)
    with torch.no_grad():
        sae.b_dec.copy_(x.mean(dim=0))
    opt = torch.optim.Adam(sae.parameters(), lr=lr)

    def full_loss():
        with torch.no_grad():
            return float((sae(x) - x).pow(2).sum(-1).mean())

    curve = [full_loss()]
    for _ in range(epochs):
        perm = torch.randperm(len(x), generator=gen)
        for start in range(0, len(x), batch_size):
            xb = x[perm[start:start + batch_size]]
            loss = (sae(xb) - xb).pow(2).sum(-1).mean()
            opt.zero_grad()
            loss.backward()
            opt.step()
            sae.normalize_decoder()
        curve.append(full_loss())
    for p in sae.parameters():
        p.requires_grad_(False)
    return (sae, curve) if return_curve else sae


class TopKSAE(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` trains, ``transform`` encodes, ``inverse_transform`` decodes."""

    def __init__(self, dict_size: int = 256, k: int = 16, epochs: int = 20, lr: float = 1e-3,
                 batch_size: int = 256, random_state: int = 0):
        self.dict_size = dict_size
        self.k = k
        self.epochs = epochs
        self.lr = lr
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float32)
        self.sae_, self.loss_curve_ = train_toy_sae(
            X, self.dict_size, self.k, self.epochs, lr=self.lr, batch_size=self.batch_size,
            random_state=self.random_state, return_curve=True)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "sae_")
        X = check_array(X, dtype=np.float32)
        with torch.no_grad():
            return self.sae_.encode(torch.from_numpy(X)).numpy()

    def inverse_transform(self, X):
        check_is_fitted(self, "sae_")
        X = check_array(X, dtype=np.float32)
        with torch.no_grad():
            return self.sae_.decode(torch.from_numpy(X)).numpy()

    @classmethod
    def from_module(cls, sae: SparseAutoencoder) -> "TopKSAE":
        est = cls(dict_size=sae.dict_size, k=sae.k)
        est.sae_ = sae
        est.n_features_in_ = sae.input_dim
        return est
