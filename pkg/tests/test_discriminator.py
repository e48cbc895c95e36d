import math

import numpy as np
import pytest
import torch
import torch.nn.functional as F
from hypothesis import given
from hypothesis import strategies as st

from helpers import nested_lerp_volume
from scenegan.discriminator import (Discriminator, DiscriminatorConfig, build_topdown_summary, disc_forward,
                                    layout_loss, make_dual, make_real_dual, segment_topdown, summary_heights)
from scenegan.errors import ShapeMismatch
from scenegan.generator import extrude
from scenegan.neural_field import sample_trilinear, volume_to_xyzc

D64 = torch.float64
SMALL = DiscriminatorConfig(img_resolution=32, base_channels=8, max_channels=16, summary_resolution=8,
                            summary_channels=12, num_classes=3)


def make_disc(cfg=SMALL, seed=0):
    torch.manual_seed(seed)
    return Discriminator(cfg)


# -- dual images -------------------------------------------------------------

def test_dual_has_six_channels():
    dual = make_dual(torch.rand(2, 3, 64, 64), torch.rand(2, 3, 32, 32))
    assert dual.shape == (2, 6, 64, 64)


def test_factor_one_halves_identical():
    real = torch.rand(2, 3, 16, 16)
    dual = make_real_dual(real, 1)
    assert torch.equal(dual[:, :3], dual[:, 3:])
    fin = torch.rand(1, 3, 16, 16)
    d2 = make_dual(fin, fin)
    assert torch.equal(d2[:, :3], d2[:, 3:])


def band_energy(img: np.ndarray, cutoff: float) -> float:
    """Spectral energy with max(|fx|, |fy|) above ``cutoff`` cycles per image."""
    spec = np.abs(np.fft.fft2(img)) ** 2
    f = np.abs(np.fft.fftfreq(img.shape[-1]) * img.shape[-1])
    high = np.maximum(f[:, None], f[None, :]) > cutoff
    return float(spec[..., high].sum())


def test_real_blur_removes_high_band():
    g = torch.Generator().manual_seed(0)
    real = torch.rand(1, 3, 64, 64, generator=g)
    dual = make_real_dual(real, 4)
    nyquist = 64 / 4 / 2  # cycles per image on the 16x16 grid
    orig = band_energy(dual[0, :3].numpy() - 0.5, nyquist)
    blurred = band_energy(dual[0, 3:].numpy() - 0.5, nyquist)
    assert blurred < 0.05 * orig


# -- critic ------------------------------------------------------------------

def test_logit_finite_and_translation_sensitive():
    disc = make_disc()
    x = torch.rand(2, 6, 32, 32)
    logit = disc_forward(disc, x)
    assert logit.shape == (2,) and torch.isfinite(logit).all()
    shifted = torch.roll(x, shifts=(3, 5), dims=(2, 3))
    assert not torch.allclose(disc(x), disc(shifted))


def test_input_gradient_and_double_backward():
    disc = make_disc()
    x = torch.rand(2, 6, 32, 32, requires_grad=True)
    (g,) = torch.autograd.grad(disc(x).sum(), x, create_graph=True)
    assert g.shape == x.shape and torch.isfinite(g).all()
    g.square().sum().backward()
    assert any(p.grad is not None and p.grad.abs().sum() > 0 for p in disc.parameters())


def test_disc_deterministic():
    disc = make_disc()
    x = torch.rand(1, 6, 32, 32)
    assert torch.equal(disc(x), disc(x))


def test_bad_summary_level():
    with pytest.raises(ValueError):
        Discriminator(DiscriminatorConfig(img_resolution=32, summary_resolution=64))


# -- top-down summary --------------------------------------------------------

def test_summary_shape_toy():
    vol = torch.randn(2, 16, 32, 32, 32)
    s = build_topdown_summary(vol, 8, 1 / 32, generator=torch.Generator().manual_seed(0))
    assert s.shape == (2, 8 * 16, 32, 32)


def test_summary_heights():
    h = summary_heights(8)
    assert torch.all((h > -1) & (h < 1))
    assert torch.allclose(torch.diff(h), torch.full((7,), 0.25, dtype=D64))


def test_y_constant_volume_blocks_identical():
    g = torch.Generator().manual_seed(1)
    col = torch.randn(1, 4, 8, 1, 8, generator=g, dtype=D64)
    vol = col.expand(1, 4, 8, 8, 8).contiguous()
    s = build_topdown_summary(vol, 5, 0.0)
    blocks = s.reshape(1, 5, 4, 8, 8)
    for j in range(1, 5):
        # (1-w)a + wa equals a only up to rounding
        assert torch.allclose(blocks[:, j], blocks[:, 0], rtol=0, atol=1e-12)


def loop_summary(vol: torch.Tensor, k: int) -> torch.Tensor:
    """One trilinear query per (pixel, height), assembled by explicit index loops."""
    _, c, _, _, n = vol.shape
    out = torch.empty(1, k * c, n, n, dtype=vol.dtype)
    heights = [-1 + (j + 0.5) * 2 / k for j in range(k)]
    for row in range(n):
        for col in range(n):
            x, z = -1 + (col + 0.5) * 2 / n, -1 + (row + 0.5) * 2 / n
            for j, y in enumerate(heights):
                f = sample_trilinear(vol[0], torch.tensor([[x, y, z]], dtype=vol.dtype))[0]
                for ch in range(c):
                    out[0, j * c + ch, row, col] = f[ch]
    return out


def test_zero_jitter_matches_loop_oracle():
    g = torch.Generator().manual_seed(2)
    vol = torch.randn(1, 3, 8, 8, 8, generator=g, dtype=D64)
    s = build_topdown_summary(vol, 4, 0.0)
    assert torch.equal(s, loop_summary(vol, 4))
    # and the interpolation itself against the nested-lerp oracle
    xyzc = volume_to_xyzc(vol[0]).numpy()
    want = nested_lerp_volume(xyzc, (-1 + 5.5 * 2 / 8, -1 + 2.5 * 2 / 4, -1 + 1.5 * 2 / 8))
    assert np.allclose(s[0, 2 * 3:3 * 3, 1, 5].numpy(), want, atol=1e-12)


def test_summary_jitter_is_seeded():
    vol = torch.randn(1, 2, 8, 8, 8)
    a = build_topdown_summary(vol, 4, 0.1, generator=torch.Generator().manual_seed(3))
    b = build_topdown_summary(vol, 4, 0.1, generator=torch.Generator().manual_seed(3))
    c = build_topdown_summary(vol, 4, 0.1, generator=torch.Generator().manual_seed(4))
    assert torch.equal(a, b) and not torch.equal(a, c)


@pytest.mark.parametrize("turns", [1, 2, 3])
def test_rotation_about_y_rotates_summary(turns):
    g = torch.Generator().manual_seed(5)
    vol = torch.randn(1, 3, 8, 8, 8, generator=g, dtype=D64)  # (B, C, Z, Y, X)
    rotated = torch.rot90(vol, turns, dims=(2, 4))
    s = build_topdown_summary(vol, 4, 0.0)
    s_rot = build_topdown_summary(rotated, 4, 0.0)
    assert torch.equal(s_rot, torch.rot90(s, turns, dims=(2, 3)))


def test_summary_of_extruded_volume():
    # channel j*C + c at a pixel must come from the pre-extrusion channels of that same pixel
    n, c = 8, 2
    f2d = torch.randn(1, n * c, n, n, dtype=D64)
    s = build_topdown_summary(extrude(f2d, c), n, 0.0)
    # with k = N the heights coincide with the voxel nodes: the summary is the feature image itself
    assert torch.allclose(s, f2d, atol=1e-12)


# -- segmentation ------------------------------------------------------------

def test_segment_shape_deterministic():
    disc = make_disc()
    s = torch.randn(2, 12, 8, 8)
    logits = segment_topdown(disc, s)
    assert logits.shape == (2, 3, 8, 8)
    assert torch.equal(logits, segment_topdown(disc, s))
    with pytest.raises(ShapeMismatch):
        disc.segment(torch.randn(2, 11, 8, 8))


def test_segmentation_gradients_reach_volume_and_parameters():
    disc = make_disc()
    vol = torch.randn(2, 3, 8, 8, 8, requires_grad=True)
    s = build_topdown_summary(vol, 4, 1 / 8, generator=torch.Generator().manual_seed(0))
    labels = torch.randint(0, 3, (2, 8, 8), generator=torch.Generator().manual_seed(1))
    layout_loss(disc.segment(s), labels).backward()
    assert vol.grad.abs().sum() > 0
    used = ["seg_adapter", "seg_up", "seg_out"] + [f"blocks.{i}" for i in range(disc.seg_start, len(disc.blocks))]
    for name, p in disc.named_parameters():
        if any(name.startswith(u) for u in used):
            assert p.grad is not None and p.grad.abs().sum() > 0, name


# -- layout loss -------------------------------------------------------------

def test_saturated_loss_zero():
    labels = torch.randint(0, 5, (2, 6, 6), generator=torch.Generator().manual_seed(0))
    logits = F.one_hot(labels, 5).permute(0, 3, 1, 2).double() * 200.0
    assert layout_loss(logits, labels).item() < 1e-12


def test_uniform_logits_ln5():
    labels = torch.randint(0, 5, (2, 6, 6), generator=torch.Generator().manual_seed(1))
    assert abs(layout_loss(torch.zeros(2, 5, 6, 6, dtype=D64), labels).item() - math.log(5)) < 1e-9


def softmax_ce_oracle(logits: np.ndarray, labels: np.ndarray) -> float:
    total, count = 0.0, 0
    b, _, h, w = logits.shape
    for i in range(b):
        for r in range(h):
            for c in range(w):
                z = logits[i, :, r, c]
                m = z.max()
                total += m + math.log(np.exp(z - m).sum()) - z[labels[i, r, c]]
                count += 1
    return total / count


def test_random_loss_vs_oracle():
    g = torch.Generator().manual_seed(2)
    logits = torch.randn(2, 5, 7, 7, generator=g, dtype=D64) * 3
    labels = torch.randint(0, 5, (2, 7, 7), generator=g)
    assert abs(layout_loss(logits, labels).item() - softmax_ce_oracle(logits.numpy(), labels.numpy())) < 1e-6


def test_loss_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        layout_loss(torch.zeros(1, 5, 4, 4), torch.zeros(1, 5, 5, dtype=torch.long))


@given(st.integers(0, 2**31 - 1), st.floats(0.01, 20))
def test_loss_nonnegative(seed, scale):
    g = torch.Generator().manual_seed(seed)
    logits = torch.randn(1, 4, 5, 5, generator=g, dtype=D64) * scale
    labels = torch.randint(0, 4, (1, 5, 5), generator=g)
    assert layout_loss(logits, labels).item() >= 0
