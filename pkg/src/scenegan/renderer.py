"""Ray generation, hierarchical sampling and emission-absorption compositing."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch

from .errors import AllZeroWeights, DegenerateCamera, UnsortedDepths

WHITE = 1.0
DEPTH_EPS = 1e-6


@dataclass(frozen=True)
class CameraPose:
    position: tuple[float, float, float]
    target: tuple[float, float, float]
    up: tuple[float, float, float] = (0.0, 1.0, 0.0)
    fov: float = math.radians(60.0)  # vertical field of view

    def __post_init__(self):
        for name in ("position", "target", "up"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "fov", float(self.fov))
        if not 0.0 < self.fov < math.pi:
            raise ValueError("fov must lie in (0, pi)")
        if np.allclose(self.position, self.target):
            raise DegenerateCamera("camera position equals its target")

    def frame(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal (right, up, forward) basis."""
        fwd = np.asarray(self.target, float) - np.asarray(self.position, float)
        fwd /= np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(self.up, float))
        norm = np.linalg.norm(right)
        if norm < 1e-9:
            raise DegenerateCamera("up vector is parallel to the viewing direction")
        right /= norm
        return right, np.cross(right, fwd), fwd

    def to_list(self) -> list[float]:
        return [*self.position, *self.target, *self.up, self.fov]

    @classmethod
    def from_list(cls, vals) -> "CameraPose":
        v = [float(x) for x in vals]
        return cls(tuple(v[0:3]), tuple(v[3:6]), tuple(v[6:9]), v[9])


# -- counter-based random numbers -------------------------------------------


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        x = x + np.uint64(0x9E3779B97F4A7C15)
        x = (x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        x = (x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        return x ^ (x >> np.uint64(31))


class RayRng:
    """Uniform draws keyed by (seed, ray id, sample index, stream).

    Every ray's numbers depend only on its own id, so splitting a render into
    chunks, or running chunks in parallel, reproduces the serial draws exactly.
    """

    def __init__(self, seed: int, ray_ids=None):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.ray_ids = None if ray_ids is None else np.asarray(ray_ids, dtype=np.uint64)

    def subset(self, ray_ids) -> "RayRng":
        return RayRng(self.seed, ray_ids)

    def uniform(self, shape_rays: int, n: int, stream: int) -> torch.Tensor:
        ids = self.ray_ids if self.ray_ids is not None else np.arange(shape_rays, dtype=np.uint64)
        if ids.shape[0] != shape_rays:
            raise ValueError("ray id count does not match the number of rays")
        with np.errstate(over="ignore"):
            key = _splitmix64(np.uint64(self.seed) ^ _splitmix64(np.uint64(stream + 1)))
            ctr = ids[:, None] * np.uint64(1 << 20) + np.arange(n, dtype=np.uint64)[None, :]
            bits = _splitmix64(ctr ^ key)
        u = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
        return torch.from_numpy(u)


# -- rays --------------------------------------------------------------------

def make_rays(camera: CameraPose, h: int, w: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Pixel-center pinhole rays, row 0 at the top. Returns (H*W, 3) origins and unit directions."""
    right, up, fwd = camera.frame()
    tan_half = math.tan(camera.fov / 2)
    aspect = w / h
    cols = ((np.arange(w) + 0.5) / w * 2 - 1) * tan_half * aspect
    rows = (1 - (np.arange(h) + 0.5) / h * 2) * tan_half
    yy, xx = np.meshgrid(rows, cols, indexing="ij")
    d = fwd[None, None] + xx[..., None] * right[None, None] + yy[..., None] * up[None, None]
    d = d.reshape(-1, 3)
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.broadcast_to(np.asarray(camera.position, float), d.shape).copy()
    return torch.from_numpy(o), torch.from_numpy(d)


def make_topdown_rays(n: int, height: float = 2.0) -> tuple[torch.Tensor, torch.Tensor]:
    """Orthographic rays looking down -y, one per floorplan pixel (row = z, col = x)."""
    c = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    zz, xx = np.meshgrid(c, c, indexing="ij")
    o = np.stack([xx, np.full_like(xx, height), zz], axis=-1).reshape(-1, 3)
    d = np.broadcast_to(np.array([0.0, -1.0, 0.0]), o.shape).copy()
    return torch.from_numpy(o), torch.from_numpy(d)


def ray_aabb_bounds(origins: torch.Tensor, directions: torch.Tensor, lo: float = -1.0, hi: float = 1.0,
                    min_near: float | None = None):
    """Slab intersection against [lo, hi]^3.

    Returns ``(near, far, hit)``; ``near``/``far`` are only meaningful where
    ``hit`` is true. With ``min_near`` set, near is clamped from below (for
    origins inside the box).
    """
    o, d = origins, directions
    parallel = d == 0
    safe_d = torch.where(parallel, torch.ones_like(d), d)
    t0 = (lo - o) / safe_d
    t1 = (hi - o) / safe_d
    tmin = torch.minimum(t0, t1)
    tmax = torch.maximum(t0, t1)
    inside_slab = (o >= lo) & (o <= hi)
    inf = torch.full_like(tmin, math.inf)
    tmin = torch.where(parallel, torch.where(inside_slab, -inf, inf), tmin)
    tmax = torch.where(parallel, torch.where(inside_slab, inf, -inf), tmax)
    near = tmin.amax(dim=-1)
    far = tmax.amin(dim=-1)
    if min_near is not None:
        near = near.clamp(min=min_near)
    hit = far > near
    if min_near is None:
        hit = hit & (far > 0)
    return near, far, hit


# -- sampling ----------------------------------------------------------------

def stratified_samples(near: torch.Tensor, far: torch.Tensor, n: int, rng: RayRng, stream: int = 0):
    """One uniform draw per equal-width bin of [near, far]; (R, n), ascending."""
    if n < 1:
        raise ValueError("n must be >= 1")
    u = rng.uniform(near.shape[0], n, stream).to(near.dtype)
    i = torch.arange(n, dtype=near.dtype)
    return near[:, None] + (i[None] + u) / n * (far - near)[:, None]


def importance_samples(bin_edges: torch.Tensor, weights: torch.Tensor, n: int, rng: RayRng, stream: int = 1,
                       detach: bool = True):
    """Inverse-CDF draws from the piecewise-constant pdf proportional to ``weights``.

    bin_edges (R, K+1), weights (R, K) -> (R, n) ascending depths. With
    ``detach=False`` the depths stay differentiable in weights and edges.
    """
    if detach:
        weights = weights.detach()
        bin_edges = bin_edges.detach()
    if (weights < 0).any():
        raise ValueError("weights must be non-negative")
    total = weights.sum(dim=-1, keepdim=True)
    if (total <= 0).any():
        raise AllZeroWeights("every ray needs at least one positive weight")
    pdf = weights / total
    cdf = torch.cat([torch.zeros_like(pdf[:, :1]), torch.cumsum(pdf[:, :-1], dim=-1),
                     torch.ones_like(pdf[:, :1])], dim=-1)
    u = rng.uniform(weights.shape[0], n, stream).to(weights.dtype)
    u, _ = torch.sort(u, dim=-1)
    k = weights.shape[1]
    idx = (torch.searchsorted(cdf.detach().contiguous(), u.contiguous(), right=True) - 1).clamp(0, k - 1)
    c0 = torch.gather(cdf, 1, idx)
    c1 = torch.gather(cdf, 1, idx + 1)
    e0 = torch.gather(bin_edges, 1, idx)
    e1 = torch.gather(bin_edges, 1, idx + 1)
    span = c1 - c0
    frac = torch.where(span > 0, (u - c0) / torch.where(span > 0, span, torch.ones_like(span)),
                       torch.zeros_like(u))
    return e0 + frac.clamp(0, 1) * (e1 - e0)


# -- compositing -------------------------------------------------------------

def composite_weights(depths, densities, far):
    """Per-sample compositing weights T_i * alpha_i and the residual transmittance."""
    gaps = depths[:, 1:] - depths[:, :-1]
    if (gaps < 0).any():
        raise UnsortedDepths("sample depths must be ascending along each ray")
    last = (far[:, None] - depths[:, -1:]).clamp(min=0)
    deltas = torch.cat([gaps, last], dim=-1)
    tau = densities * deltas
    alpha = -torch.expm1(-tau)
    acc = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(acc[:, :1]), acc[:, :-1]], dim=-1))
    return trans * alpha, torch.exp(-acc[:, -1])


def composite(depths, densities, features, background, far):
    """Alpha-composite samples along rays.

    depths (R, K) ascending, densities (R, K) >= 0, features (R, K, F),
    background (F,), far (R,). The last interval runs to ``far``.
    Returns (pixel (R, F), depth (R,), opacity (R,), weights (R, K)).
    """
    weights, residual = composite_weights(depths, densities, far)
    opacity = weights.sum(dim=-1)
    pixel = (weights[..., None] * features).sum(dim=1) + residual[:, None] * background
    depth = (weights * depths).sum(dim=-1) / opacity.clamp(min=DEPTH_EPS)
    return pixel, depth, opacity, weights


@dataclass
class RenderOutput:
    features: torch.Tensor  # (B, F, H, W)
    depth: torch.Tensor  # (B, H, W)
    opacity: torch.Tensor  # (B, H, W)
    near: torch.Tensor  # (B, H, W)
    far: torch.Tensor  # (B, H, W)
    hit: torch.Tensor  # (B, H, W) bool

    @property
    def rgb(self) -> torch.Tensor:
        return self.features[:, :3]


def render_rays(field, origins, directions, rng: RayRng, n_coarse: int = 48, n_fine: int = 48,
                background: float = WHITE, chunk: int | None = None, detach_samples: bool = True):
    """Hierarchical render of (B, R, 3) rays through a batched field.

    Fine sample depths are detached by default, the usual practice. With
    ``detach_samples=False`` gradients also flow through where they land,
    making the output's gradient that of the full estimator.

    Returns per-ray (pixel (B, R, F), depth, opacity, near, far, hit).
    """
    b, r, _ = origins.shape
    if chunk is not None and chunk < r:
        ids = _ray_ids(b, r, rng)
        parts = [render_rays(field, origins[:, s:s + chunk], directions[:, s:s + chunk],
                             rng.subset(ids[:, s:s + chunk].reshape(-1)),
                             n_coarse, n_fine, background, None, detach_samples)
                 for s in range(0, r, chunk)]
        return tuple(torch.cat([p[i] for p in parts], dim=1) for i in range(6))

    dtype = origins.dtype
    o = origins.reshape(-1, 3)
    d = directions.reshape(-1, 3)
    near, far, hit = ray_aabb_bounds(o, d, min_near=0.0)
    near = torch.where(hit, near, torch.zeros_like(near))
    far = torch.where(hit, far, torch.ones_like(far))
    ray_rng = rng if rng.ray_ids is not None else rng.subset(np.arange(b * r, dtype=np.uint64))

    def query(t):
        pts = o[:, None] + t[..., None] * d[:, None]
        sigma, feat = field(pts.reshape(b, -1, 3).to(dtype))
        k = t.shape[1]
        sigma = sigma.reshape(b * r, k) * hit[:, None].to(sigma.dtype)
        return sigma, feat.reshape(b * r, k, -1)

    # The first coarse sample sits on the near bound so the forward intervals
    # tile [near, far] completely; the rest are stratified.
    if n_coarse < 1:
        raise ValueError("n_coarse must be >= 1")
    t_c = near[:, None]
    if n_coarse > 1:
        t_c = torch.cat([t_c, stratified_samples(near, far, n_coarse - 1, ray_rng, stream=0)], dim=-1)
    t_c = t_c.to(dtype)
    sigma_c, feat_c = query(t_c)
    bg = torch.full((feat_c.shape[-1],), background, dtype=feat_c.dtype)
    if n_fine > 0:
        with torch.set_grad_enabled(torch.is_grad_enabled() and not detach_samples):
            w_c = composite_weights(t_c, sigma_c, far)[0]
        # Weight i is mass over [t_i, t_{i+1}], but a density onset that makes
        # sample i opaque lies in [t_{i-1}, t_i]; attributing each weight to the
        # interval before it puts fine samples where surfaces start. The first
        # and last weights also keep their own intervals so both ends stay covered.
        edges = torch.cat([t_c, far[:, None]], dim=-1)
        if n_coarse == 1:
            pdf = w_c
        else:
            pdf = torch.cat([w_c[:, :1] + w_c[:, 1:2], w_c[:, 2:], w_c[:, -1:]], dim=-1)
        t_f = importance_samples(edges, pdf + 1e-5, n_fine, ray_rng, stream=1, detach=detach_samples).to(dtype)
        sigma_f, feat_f = query(t_f)
        # Composite the sorted union; features stay unsorted and the weights
        # are scattered back to them instead of gathering 32-channel rows.
        t_all, order = torch.sort(torch.cat([t_c, t_f], dim=-1), dim=-1)
        sigma = torch.gather(torch.cat([sigma_c, sigma_f], dim=-1), 1, order)
        w_sorted, residual = composite_weights(t_all, sigma, far)
        weights = torch.zeros_like(w_sorted).scatter(1, order, w_sorted)
        feats = torch.cat([feat_c, feat_f], dim=1)
        opacity = w_sorted.sum(dim=-1)
        pixel = torch.bmm(weights[:, None, :], feats)[:, 0] + residual[:, None] * bg
        depth = (w_sorted * t_all).sum(dim=-1) / opacity.clamp(min=DEPTH_EPS)
    else:
        pixel, depth, opacity, _ = composite(t_c, sigma_c, feat_c, bg, far)
    shape = (b, r)
    return (pixel.reshape(b, r, -1), depth.reshape(shape), opacity.reshape(shape),
            near.reshape(shape), far.reshape(shape), hit.reshape(shape))


def _ray_ids(b: int, r: int, rng: RayRng) -> np.ndarray:
    if rng.ray_ids is not None:
        return rng.ray_ids.reshape(b, r)
    return np.arange(b * r, dtype=np.uint64).reshape(b, r)


def render(field, cameras, h: int, w: int, rng, n_coarse: int = 48, n_fine: int = 48,
           background: float = WHITE, chunk: int | None = None, detach_samples: bool = True) -> RenderOutput:
    """Render a batched field from one camera per batch element.

    ``rng`` is an integer seed or a :class:`RayRng`.
    """
    if isinstance(cameras, CameraPose):
        cameras = [cameras] * field.batch_size
    rays = [make_rays(c, h, w) for c in cameras]
    dtype = _field_dtype(field)
    origins = torch.stack([o for o, _ in rays]).to(dtype)
    dirs = torch.stack([d for _, d in rays]).to(dtype)
    if not isinstance(rng, RayRng):
        rng = RayRng(int(rng))
    pixel, depth, opacity, near, far, hit = render_rays(field, origins, dirs, rng, n_coarse, n_fine,
                                                        background, chunk, detach_samples)
    b = len(cameras)
    return RenderOutput(
        features=pixel.reshape(b, h, w, -1).permute(0, 3, 1, 2),
        depth=depth.reshape(b, h, w),
        opacity=opacity.reshape(b, h, w),
        near=near.reshape(b, h, w),
        far=far.reshape(b, h, w),
        hit=hit.reshape(b, h, w),
    )


def render_topdown(field, n: int, rng, n_coarse: int = 48, n_fine: int = 48,
                   background: float = WHITE) -> RenderOutput:
    """Orthographic top-down render aligned pixel-for-pixel with the layout grid."""
    o, d = make_topdown_rays(n)
    b = field.batch_size
    dtype = _field_dtype(field)
    origins = o[None].expand(b, -1, -1).to(dtype)
    dirs = d[None].expand(b, -1, -1).to(dtype)
    if not isinstance(rng, RayRng):
        rng = RayRng(int(rng))
    pixel, depth, opacity, near, far, hit = render_rays(field, origins, dirs, rng, n_coarse, n_fine, background)
    return RenderOutput(
        features=pixel.reshape(b, n, n, -1).permute(0, 3, 1, 2),
        depth=depth.reshape(b, n, n),
        opacity=opacity.reshape(b, n, n),
        near=near.reshape(b, n, n),
        far=far.reshape(b, n, n),
        hit=hit.reshape(b, n, n),
    )


def _field_dtype(field):
    rep = getattr(field, "representation", None)
    return rep.dtype if rep is not None else torch.get_default_dtype()
