import json

import numpy as np
import pytest
import torch

from lvo.data import ToyShapesDataset, load_dataset
from lvo.diffusion import (
    SchedulerTable,
    build_scheduler,
    default_device,
    forward_with_edit,
    forward_with_hook,
    inject_schedule_noise,
    run_hooked,
    sample,
    sample_latent,
)
from lvo.toy import ToyLdm

from conftest import make_tiny_ldm


def test_linear_schedule_matches_manual_cumprod():
    s = build_scheduler(50, beta_start=1e-4, beta_end=0.02)
    betas = [1e-4 + i * (0.02 - 1e-4) / 49 for i in range(50)]
    ab, prod = [], 1.0
    for b in betas:
        prod *= 1 - b
        ab.append(prod)
    np.testing.assert_allclose(s.betas, betas, rtol=1e-12)
    np.testing.assert_allclose(s.alpha_bar, ab, rtol=1e-12)
    assert s.T == 50


def test_scheduler_rejects_bad_input():
    with pytest.raises(ValueError):
        build_scheduler(0)
    with pytest.raises(ValueError):
        build_scheduler(10, "cosine-ish")
    with pytest.raises(ValueError):
        SchedulerTable(np.array([0.5, 1.0]))
    with pytest.raises(ValueError):
        build_scheduler(10).check_timestep(10)


def test_noise_formula_with_forced_eps():
    s = SchedulerTable(np.array([0.1, 0.3]))
    ab = (1 - 0.1) * (1 - 0.3)
    z = torch.randn(4, 8, 8, dtype=torch.float64)
    eps = torch.randn(4, 8, 8, dtype=torch.float64)
    out = inject_schedule_noise(z, 1, s, lambda shape, dtype: eps)
    torch.testing.assert_close(out, ab ** 0.5 * z + (1 - ab) ** 0.5 * eps, rtol=0, atol=1e-14)


def test_noise_identity_at_unit_alpha_bar():
    s = SchedulerTable(np.array([0.0, 0.5]))
    z = torch.randn(4, 8, 8)
    assert inject_schedule_noise(z, 0, s, torch.Generator()) is z
    zn = z.numpy()
    assert np.array_equal(inject_schedule_noise(zn, 0, s), zn)


def test_noise_numpy_round_trip_and_seed():
    s = build_scheduler(10)
    z = np.zeros((4, 8, 8), dtype=np.float32)
    g1, g2 = torch.Generator(), torch.Generator()
    g1.manual_seed(5)
    g2.manual_seed(5)
    a = inject_schedule_noise(z, 9, s, g1)
    b = inject_schedule_noise(z, 9, s, g2)
    assert isinstance(a, np.ndarray) and np.array_equal(a, b)


def test_capture_shapes_and_layouts(tiny_ldm):
    den = tiny_ldm.denoiser
    z = torch.randn(2, *den.latent_shape, dtype=torch.float64)
    pred, cap = run_hooked(den, z, torch.tensor([0, 3]), None, capture=list(den.hook_points()))
    assert pred.shape == z.shape
    assert cap["attn"].shape == (2, 16, 16)
    assert cap["in_conv"].shape == (2, 8, 8, 8)
    assert all(not m._forward_hooks for m in den.hook_points().values())


def test_identity_edit_is_bit_exact(tiny_ldm):
    den = tiny_ldm.denoiser
    z = torch.randn(*den.latent_shape, dtype=torch.float64)
    plain, _ = forward_with_hook(den, z, 4, 1, "attn")
    edited = forward_with_edit(den, z, 4, 1, "attn", lambda F: F)
    assert torch.equal(plain, edited)
    shifted = forward_with_edit(den, z, 4, 1, "attn", lambda F: F + 10.0)
    assert not torch.allclose(plain, shifted)


def test_capture_sees_edited_activations(tiny_ldm):
    den = tiny_ldm.denoiser
    z = torch.randn(1, *den.latent_shape, dtype=torch.float64)
    _, cap = run_hooked(den, z, torch.tensor([2]), None, edits={"attn": lambda F: F * 0}, capture=["attn"])
    assert torch.count_nonzero(cap["attn"]) == 0


def test_edit_errors(tiny_ldm):
    den = tiny_ldm.denoiser
    z = torch.randn(1, *den.latent_shape, dtype=torch.float64)
    t = torch.tensor([0])
    with pytest.raises(ValueError, match="output head"):
        run_hooked(den, z, t, edits={"out": lambda F: F})
    with pytest.raises(KeyError, match="available layers: in_conv, down, attn, up, out"):
        run_hooked(den, z, t, capture=["mid"])
    with pytest.raises(ValueError, match="changed activation shape"):
        run_hooked(den, z, t, edits={"attn": lambda F: F[:, :1]})
    assert all(not m._forward_hooks for m in den.hook_points().values())


def test_sampling_is_deterministic_and_hook_none_is_noop(tiny_ldm):
    den, s = tiny_ldm.denoiser, tiny_ldm.scheduler
    a = sample_latent(den, s, 2, seed=7)
    b = sample_latent(den, s, 2, seed=7, steering_hook=lambda t: None)
    c = sample_latent(den, s, 2, seed=8)
    assert torch.equal(a, b)
    assert not torch.equal(a, c)


def test_sampling_visits_timesteps_in_descending_order(tiny_ldm):
    seen = []
    sample_latent(tiny_ldm.denoiser, tiny_ldm.scheduler, None, 0, on_step=lambda t, x, cap: seen.append(t))
    assert seen == list(range(tiny_ldm.scheduler.T - 1, -1, -1))


def test_steering_one_step_leaves_earlier_steps_unchanged(tiny_ldm):
    den, s = tiny_ldm.denoiser, tiny_ldm.scheduler
    trace_a, trace_b = {}, {}
    sample_latent(den, s, None, 1, on_step=lambda t, x, cap: trace_a.__setitem__(t, x.clone()))
    hook = lambda t: {"attn": lambda F: F + 5.0} if t == 4 else None
    sample_latent(den, s, None, 1, hook, on_step=lambda t, x, cap: trace_b.__setitem__(t, x.clone()))
    for t in range(s.T - 1, 3, -1):
        assert torch.equal(trace_a[t], trace_b[t])
    assert not torch.equal(trace_a[3], trace_b[3])


def test_sample_with_codec_returns_image(tiny_ldm):
    img = sample(tiny_ldm.denoiser, tiny_ldm.scheduler, 0, 0, codec=tiny_ldm.vae)
    assert img.shape == (3, 32, 32)
    assert float(img.min()) >= 0 and float(img.max()) <= 1


def test_checkpoint_round_trip(tmp_path):
    ldm = make_tiny_ldm(dtype=torch.float32)
    ldm.save(tmp_path)
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["layers"] == ["in_conv", "down", "attn", "up", "out"]
    assert manifest["hook_layer"] == "attn"
    loaded = ToyLdm.load(tmp_path)
    z = torch.randn(1, 4, 8, 8)
    t = torch.tensor([3])
    torch.testing.assert_close(run_hooked(loaded.denoiser, z, t)[0], run_hooked(ldm.denoiser, z, t)[0])
    assert loaded.scheduler.T == ldm.scheduler.T


def test_missing_checkpoint_raises(tmp_path):
    with pytest.raises(FileNotFoundError):
        ToyLdm.load(tmp_path)


def test_default_device_env(monkeypatch):
    monkeypatch.setenv("LVO_DEVICE", "cpu")
    assert default_device() == torch.device("cpu")
    monkeypatch.delenv("LVO_DEVICE")
    assert default_device().type == "cpu"


def test_toy_shapes_dataset_is_reproducible():
    a, b = ToyShapesDataset(n=8, seed=3), ToyShapesDataset(n=8, seed=3)
    assert torch.equal(a.images, b.images) and a.prompts == b.prompts
    ex = a[0]
    assert ex.image.shape == (3, 32, 32) and 0 <= ex.label < 4 and ex.prompt.startswith("A ")
    assert len(load_dataset({"kind": "toy_shapes", "n": 5})) == 5
    with pytest.raises(ValueError):
        load_dataset({"kind": "laion"})
