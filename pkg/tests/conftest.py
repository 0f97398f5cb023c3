import pytest
import torch

from lvo.diffusion import DenoiserModel, build_scheduler
from lvo.sae import SparseAutoencoder
from lvo.toy import ToyDenoiser, ToyLdm, ToyVae


def make_tiny_ldm(seed=0, T=10, dtype=torch.float64):
    torch.manual_seed(seed)
    vae = ToyVae(hidden=8)
    den = ToyDenoiser(width=8, attn_width=16, emb_dim=16)
    vae.eval()
    den.eval()
    for p in list(vae.parameters()) + list(den.parameters()):
        p.requires_grad_(False)
    ldm = ToyLdm(vae, den, build_scheduler(T, beta_start=1e-2, beta_end=0.3))
    return ldm.to(dtype=dtype)


@pytest.fixture
def tiny_ldm():
    return make_tiny_ldm()


@pytest.fixture
def tiny_sae():
    gen = torch.Generator()
    gen.manual_seed(3)
    sae = SparseAutoencoder(16, 32, 4, generator=gen).double()
    for p in sae.parameters():
        p.requires_grad_(False)
    return sae


class _NegSquaredDistance(torch.nn.Module):
    def __init__(self, optimum):
        super().__init__()
        self.optimum = torch.nn.Parameter(optimum, requires_grad=False)

    def forward(self, z):
        return -((z - self.optimum) ** 2).sum(dim=(1, 2, 3))[:, None, None]


class QuadraticDenoiser(DenoiserModel):
    """Surrogate whose one-token ``score`` layer is ``-||z - optimum||^2``."""

    def __init__(self, optimum):
        super().__init__()
        self.latent_shape = tuple(optimum.shape)
        self.score = _NegSquaredDistance(optimum)
        self.out = torch.nn.Identity()

    def hook_points(self):
        return {"score": self.score, "out": self.out}

    def layer_layout(self, layer_id):
        return "tokens" if layer_id == "score" else "spatial"

    def layer_width(self, layer_id):
        return 1 if layer_id == "score" else self.latent_shape[0]

    def forward(self, z, t, cond):
        self.score(z)
        return self.out(z)


_ACCEPTANCE_LINES = []


def record_acceptance(line):
    _ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
