"""Independent numerical oracles shared by the tests."""
import numpy as np
import torch


def rel_err(a, b) -> float:
    a = np.asarray(torch.as_tensor(a).detach(), dtype=np.float64).ravel()
    b = np.asarray(torch.as_tensor(b).detach(), dtype=np.float64).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def central_diff(f, x: torch.Tensor, eps: float = 1e-6, idx=None) -> torch.Tensor:
    """Central finite differences of scalar f at x (float64), optionally on a subset of flat indices."""
    x = x.detach().clone()
    flat = x.view(-1)
    idx = range(flat.numel()) if idx is None else idx
    out = torch.zeros(len(idx), dtype=torch.float64)
    for k, i in enumerate(idx):
        with torch.no_grad():
            old = flat[i].item()
            flat[i] = old + eps
            hi = float(f(x))
            flat[i] = old - eps
            lo = float(f(x))
            flat[i] = old
        out[k] = (hi - lo) / (2 * eps)
    return out


def lerp_axis(coord: float, n: int):
    """Cell-centered, border-clamped 1D interpolation stencil: (i0, i1, weight of i1)."""
    g = (coord + 1.0) * n / 2.0 - 0.5
    g = min(max(g, 0.0), n - 1.0)
    i0 = int(np.floor(g))
    i1 = min(i0 + 1, n - 1)
    return i0, i1, g - i0


def nested_lerp_volume(vol_xyzc: np.ndarray, p) -> np.ndarray:
    """Trilinear lookup as three nested 1D interpolations; vol indexed [x, y, z, c]."""
    nx, ny, nz, _ = vol_xyzc.shape
    x0, x1, wx = lerp_axis(p[0], nx)
    y0, y1, wy = lerp_axis(p[1], ny)
    z0, z1, wz = lerp_axis(p[2], nz)

    def along_z(ix, iy):
        return (1 - wz) * vol_xyzc[ix, iy, z0] + wz * vol_xyzc[ix, iy, z1]

    def along_y(ix):
        return (1 - wy) * along_z(ix, y0) + wy * along_z(ix, y1)

    return (1 - wx) * along_y(x0) + wx * along_y(x1)


def nested_lerp_plane(plane_rc: np.ndarray, col: float, row: float) -> np.ndarray:
    """Bilinear lookup on a (C, rows, cols) plane, column coordinate first."""
    _, nr, nc = plane_rc.shape
    c0, c1, wc = lerp_axis(col, nc)
    r0, r1, wr = lerp_axis(row, nr)
    top = (1 - wc) * plane_rc[:, r0, c0] + wc * plane_rc[:, r0, c1]
    bot = (1 - wc) * plane_rc[:, r1, c0] + wc * plane_rc[:, r1, c1]
    return (1 - wr) * top + wr * bot


def node_coord(i: int, n: int) -> float:
    return -1.0 + (i + 0.5) * 2.0 / n


def quadrature_oracle(field, origins, directions, near, far, n=4096, background=1.0):
    """Dense trapezoid quadrature of the emission-absorption integral, one ray at a time.

    pixel = int T(t) sigma(t) f(t) dt + T(far) * background, T = exp(-int sigma).
    """
    from scipy.integrate import cumulative_trapezoid

    out = []
    for i in range(origins.shape[0]):
        t = np.linspace(float(near[i]), float(far[i]), n)
        pts = origins[i][None].numpy() + t[:, None] * directions[i][None].numpy()
        with torch.no_grad():
            s, f = field(torch.from_numpy(pts)[None])
        s = s[0, :, 0].numpy()
        f = f[0].numpy()
        trans = np.exp(-cumulative_trapezoid(s, t, initial=0))
        pix = np.trapezoid((trans * s)[:, None] * f, t, axis=0) + trans[-1] * background
        out.append(pix)
    return np.array(out)


def random_rays(n, seed, radius=2.5, spread=0.6):
    """Rays from points on a sphere outside the cube toward random interior targets (float64)."""
    g = torch.Generator().manual_seed(seed)
    p0 = torch.randn(n, 3, generator=g, dtype=torch.float64)
    p0 = radius * p0 / p0.norm(dim=1, keepdim=True)
    tgt = (torch.rand(n, 3, generator=g, dtype=torch.float64) * 2 - 1) * spread
    d = tgt - p0
    return p0, d / d.norm(dim=1, keepdim=True)


class FuncField:
    """Analytic field for tests: density and features are plain functions of position."""

    def __init__(self, density_fn, n_feat=4, batch=1):
        self.density_fn = density_fn
        self.n_feat = n_feat
        self.batch_size = batch
        self.representation = torch.zeros(1, dtype=torch.float64)

    def __call__(self, pts):
        sigma = self.density_fn(pts)[..., None]
        feat = torch.stack([pts[..., 0], pts[..., 1], pts[..., 2], torch.ones_like(pts[..., 0])], dim=-1)
        return sigma, feat
