"""Distribution distances, a fixed random-conv embedder, the layout IoU probe and depth export."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .errors import DimensionMismatch, TooFewSamples
from .layout import concat_latent
from .renderer import CameraPose, render, render_topdown
from .tensorio import write_tensor
from .training import synthesize

EIG_TOL = 1e-10


@dataclass(frozen=True)
class FeatureStats:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    @classmethod
    def from_features(cls, feats) -> "FeatureStats":
        x = np.asarray(feats, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise TooFewSamples("need at least two feature rows")
        return cls(x.mean(axis=0), np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1]), x.shape[0])


def _psd_sqrt(mat: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((mat + mat.T) / 2)
    vals = np.where(vals > EIG_TOL, vals, 0.0)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_distance(a: FeatureStats, b: FeatureStats) -> float:
    """||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)).

    The trace of the product root is taken as the trace of
    sqrt(S_a^(1/2) S_b S_a^(1/2)), a symmetric PSD matrix with the same spectrum.
    """
    if a.mean.shape != b.mean.shape:
        raise DimensionMismatch(f"{a.mean.shape} vs {b.mean.shape}")
    root_a = _psd_sqrt(a.cov)
    mid = root_a @ b.cov @ root_a
    vals = np.linalg.eigvalsh((mid + mid.T) / 2)
    tr_root = np.sqrt(np.clip(vals, 0.0, None)).sum()
    diff = a.mean - b.mean
    d = diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_root
    return float(max(d, 0.0))


def kernel_distance(feats_a, feats_b, block_size: int = 1000, n_blocks: int | None = None) -> float:
    """Unbiased MMD^2 with the kernel (x.y / d + 1)^3, averaged over disjoint blocks.

    Blocks are consecutive slices; with fewer rows than ``block_size`` a single
    block uses every sample.
    """
    a = np.asarray(feats_a, dtype=np.float64)
    b = np.asarray(feats_b, dtype=np.float64)
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatch(f"{a.shape[1]} vs {b.shape[1]}")
    if len(a) < 2 or len(b) < 2:
        raise TooFewSamples("need at least two samples per side")
    m = min(len(a), len(b), block_size)
    blocks = n_blocks or max(1, min(len(a), len(b)) // m)
    d = a.shape[1]
    total = 0.0
    for i in range(blocks):
        x = a[i * m:(i + 1) * m]
        y = b[i * m:(i + 1) * m]
        kxx = (x @ x.T / d + 1) ** 3
        kyy = (y @ y.T / d + 1) ** 3
        kxy = (x @ y.T / d + 1) ** 3
        total += ((kxx.sum() - np.trace(kxx)) + (kyy.sum() - np.trace(kyy))) / (m * (m - 1)) \
            - 2.0 * kxy.mean()
    return float(total / blocks)


# -- embedder ----------------------------------------------------------------

class RandomConvEmbedder(nn.Module):
    """Fixed-seed random convolution pyramid; features are per-level channel means and stds."""

    variant = "randconv-v1"

    def __init__(self, seed: int = 0, channels=(16, 32, 64)):
        super().__init__()
        gen = torch.Generator().manual_seed(seed)
        layers, c = [], 3
        for ch in channels:
            conv = nn.Conv2d(c, ch, 3, stride=2, padding=1)
            with torch.no_grad():
                conv.weight.copy_(torch.randn(conv.weight.shape, generator=gen) / np.sqrt(9 * c))
                conv.bias.copy_(0.1 * torch.randn(ch, generator=gen))
            layers.append(conv)
            c = ch
        self.convs = nn.ModuleList(layers)
        self.requires_grad_(False)
        self.dim = 2 * sum(channels)

    @torch.no_grad()
    def forward(self, images):
        x = images.float() * 2 - 1
        feats = []
        for conv in self.convs:
            x = torch.tanh(conv(x))
            feats += [x.mean(dim=(2, 3)), x.std(dim=(2, 3))]
        return torch.cat(feats, dim=1)


EMBEDDERS = {RandomConvEmbedder.variant: RandomConvEmbedder}


def get_embedder(variant: str = "randconv-v1") -> RandomConvEmbedder:
    return EMBEDDERS[variant]()


def embed_images(images, embedder: RandomConvEmbedder, batch: int = 256) -> np.ndarray:
    """(M, 3, H, W) images in [0, 1] -> (M, d) float64 features, one row per image.

    Rows are computed one image per forward call so that results never depend on
    batch composition.
    """
    imgs = torch.as_tensor(images)
    rows = []
    for i in range(0, len(imgs), batch):
        chunk = imgs[i:i + batch]
        rows.extend(embedder(chunk[j:j + 1]) for j in range(len(chunk)))
    return torch.cat(rows).double().numpy() if rows else np.zeros((0, embedder.dim))


# -- layout probe ------------------------------------------------------------

class ProbeNet(nn.Module):
    """Four-level miniature encoder-decoder for per-pixel classification."""

    def __init__(self, in_ch: int, num_classes: int, width: int = 16):
        super().__init__()
        chans = [width, 2 * width, 4 * width, 4 * width]
        self.down = nn.ModuleList()
        c = in_ch
        for ch in chans:
            self.down.append(nn.Sequential(nn.Conv2d(c, ch, 3, padding=1), nn.ReLU(),
                                           nn.Conv2d(ch, ch, 3, padding=1), nn.ReLU()))
            c = ch
        self.up = nn.ModuleList()
        for lvl in range(len(chans) - 2, -1, -1):
            self.up.append(nn.Sequential(nn.Conv2d(chans[lvl + 1] + chans[lvl], chans[lvl], 3, padding=1),
                                         nn.ReLU()))
        self.head = nn.Conv2d(chans[0], num_classes, 1)

    def forward(self, x):
        skips = []
        for i, block in enumerate(self.down):
            if i:
                x = F.max_pool2d(x, 2)
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            x = block(torch.cat([x, skips.pop()], dim=1))
        return self.head(x)


def mean_iou(pred: np.ndarray, labels: np.ndarray, num_classes: int) -> float:
    """Mean IoU over classes present in either prediction or labels."""
    ious = []
    for c in range(num_classes):
        p, t = pred == c, labels == c
        union = (p | t).sum()
        if union:
            ious.append((p & t).sum() / union)
    return float(np.mean(ious))


def train_probe(inputs, labels, num_classes: int, seed: int = 0, split: float = 0.85, steps: int = 400,
                batch: int = 16, lr: float = 2e-3) -> dict:
    """Fit the probe on a seeded ``split`` share of the pairs and score mIoU on the rest."""
    x = torch.as_tensor(inputs, dtype=torch.float32)
    y = torch.as_tensor(labels, dtype=torch.long)
    n = len(x)
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    n_train = int(round(split * n))
    tr, te = order[:n_train], order[n_train:]
    if len(tr) == 0 or len(te) == 0:
        raise ValueError("split leaves an empty train or test set")
    torch.manual_seed(seed)
    net = ProbeNet(x.shape[1], num_classes)
    opt = torch.optim.Adam(net.parameters(), lr=lr)
    for _ in range(steps):
        idx = tr[rng.integers(len(tr), size=min(batch, len(tr)))]
        loss = F.cross_entropy(net(x[idx]), y[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
    with torch.no_grad():
        pred = net(x[te]).argmax(dim=1).numpy()
    return {"miou": mean_iou(pred, y[te].numpy(), num_classes), "split_ratio": split,
            "n_train": len(tr), "n_test": len(te), "seed": seed}


@torch.no_grad()
def topdown_renders(gen, dataset, cfg, seed: int, batch: int = 16) -> torch.Tensor:
    """One orthographic top-down RGB render per dataset scene at the layout resolution."""
    t = cfg.train
    gz = torch.Generator().manual_seed(seed)
    z_all = torch.randn((dataset.n_scenes, cfg.generator.style_dim), generator=gz)
    out = []
    for s in range(0, dataset.n_scenes, batch):
        structure = dataset.structure[s:s + batch]
        if not t.layout_conditioning:
            structure = torch.zeros_like(structure)
        z = z_all[s:s + batch]
        w = gen.map_style(z)
        rep = gen.to_representation(gen.unet_forward(concat_latent(structure, z), w))
        r = render_topdown(gen.field(rep), cfg.generator.resolution, seed + s, t.n_coarse, t.n_fine)
        out.append(r.rgb.clamp(0, 1))
    return torch.cat(out)


def layout_iou_probe(state, dataset, probe_seed: int = 0, split: float = 0.85, steps: int = 400) -> dict:
    """Render every scene top-down, then fit and score the probe against the class maps."""
    gen = state.generator
    imgs = topdown_renders(gen, dataset, state.config, seed=probe_seed)
    result = train_probe(imgs, dataset.labels, state.config.generator.class_count + 1,
                         seed=probe_seed, split=split, steps=steps)
    result["with_layout_loss"] = state.config.train.w_layout > 0
    return result


# -- sampling for distribution metrics ---------------------------------------

@torch.no_grad()
def generated_images(state, dataset, n: int, seed: int, batch: int = 32) -> torch.Tensor:
    """``n`` final-resolution fakes with layouts, cameras, latents and ray noise drawn from ``seed``."""
    cfg = state.config
    rng = np.random.default_rng([seed, 0x5EED])
    out = []
    for s in range(0, n, batch):
        b = min(batch, n - s)
        ids = rng.integers(dataset.n_scenes, size=b)
        cams = [dataset.sample_camera(int(i), rng) for i in ids]
        z = torch.from_numpy(rng.standard_normal((b, cfg.generator.style_dim))).float()
        final, _, _ = synthesize(state.generator, dataset.structure[ids], z, cams, cfg,
                                 int(rng.integers(2**62)), conditioning=cfg.train.layout_conditioning)
        out.append(final.clamp(0, 1))
    return torch.cat(out)


def real_images(dataset, n: int, seed: int) -> torch.Tensor:
    rng = np.random.default_rng([seed, 0xDA7A])
    return dataset.real_images(rng.choice(dataset.n_images, size=min(n, dataset.n_images), replace=False))


def fid_proxy(state, dataset, n: int, seed: int, embedder=None) -> float:
    emb = embedder or get_embedder()
    fa = embed_images(generated_images(state, dataset, n, seed), emb)
    fb = embed_images(real_images(dataset, n, seed), emb)
    return frechet_distance(FeatureStats.from_features(fa), FeatureStats.from_features(fb))


def metric_record(metric: str, value: float, n: int, seed: int, variant: str = "randconv-v1", **extra) -> dict:
    return {"metric": metric, "embedder_variant": variant, "n": n, "value": value, "seed": seed, **extra}


# -- depth export ------------------------------------------------------------

OPACITY_FLOOR = 1e-3


def export_depth(field, camera: CameraPose, path, h: int, w: int, seed: int = 0, n_coarse: int = 48,
                 n_fine: int = 48) -> dict:
    """Write ``<path>.bin`` (2, H, W) = [depth, opacity], a PNG preview and ``<path>.json`` metadata.

    Depth is the expected distance along each unit-length ray; pixels whose
    opacity is below the floor are NaN and flagged undefined.
    """
    with torch.no_grad():
        out = render(field, [camera], h, w, seed, n_coarse, n_fine)
    depth = out.depth[0].double().numpy()
    opacity = out.opacity[0].double().numpy()
    defined = opacity >= OPACITY_FLOOR
    depth = np.where(defined, depth, np.nan)
    near = float(out.near[0][out.hit[0]].min()) if out.hit[0].any() else 0.0
    far = float(out.far[0][out.hit[0]].max()) if out.hit[0].any() else 1.0
    base = Path(path)
    write_tensor(base.with_suffix(".bin"), np.stack([depth, opacity]).astype(np.float32))
    span = max(far - near, 1e-12)
    preview = np.where(defined, 1.0 - (np.nan_to_num(depth) - near) / span, 0.0)
    Image.fromarray(np.clip(np.rint(preview * 255), 0, 255).astype(np.uint8)).save(base.with_suffix(".png"))
    meta = {
        "camera": camera.to_list(),
        "camera_fields": ["px", "py", "pz", "tx", "ty", "tz", "ux", "uy", "uz", "fov_vertical_rad"],
        "height": h,
        "width": w,
        "depth_kind": "distance along unit ray direction from the camera center",
        "near": near,
        "far": far,
        "preview_normalization": "value = 1 - (depth - near) / (far - near)",
        "undefined": "nan where opacity < %g" % OPACITY_FLOOR,
        "opacity_floor": OPACITY_FLOOR,
        "all_undefined": bool(not defined.any()),
        "seed": seed,
    }
    base.with_suffix(".json").write_text(json.dumps(meta, indent=1))
    return meta
