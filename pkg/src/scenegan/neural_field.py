"""Feature-grid samplers and the density/appearance decoder.

Volumes are stored channels-first in ``grid_sample`` order, ``(B, C, Z, Y, X)``,
covering the cube [-1, 1]^3 with cell-centered nodes. Query points are
``(B, M, 3)`` in ``(x, y, z)`` order. Out-of-cube points clamp to the border.
"""
from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from .errors import WidthMismatch

# Plane name -> indices of the point coordinates used as (column, row).
PLANE_AXES = {"xy": (0, 1), "xz": (0, 2), "yz": (1, 2)}
PLANE_ORDER = ("xy", "xz", "yz")


def _batched(points: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if points.ndim == 2:
        return points[None], True
    return points, False


def volume_from_xyzc(data: torch.Tensor) -> torch.Tensor:
    """(X, Y, Z, C) or (B, X, Y, Z, C) -> (.., C, Z, Y, X)."""
    if data.ndim == 4:
        return data.permute(3, 2, 1, 0)
    return data.permute(0, 4, 3, 2, 1)


def volume_to_xyzc(volume: torch.Tensor) -> torch.Tensor:
    """Inverse of :func:`volume_from_xyzc`."""
    if volume.ndim == 4:
        return volume.permute(3, 2, 1, 0)
    return volume.permute(0, 4, 3, 2, 1)


def node_coords(n: int, dtype=torch.float64) -> torch.Tensor:
    """Normalized coordinate of each of the ``n`` cell-centered nodes along one axis."""
    return -1.0 + (torch.arange(n, dtype=dtype) + 0.5) * (2.0 / n)


def sample_trilinear(volume: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Trilinear lookup. volume (B, C, Z, Y, X) or (C, Z, Y, X); points (B, M, 3) or (M, 3).

    Returns (B, M, C), or (M, C) for unbatched input.
    """
    pts, squeeze = _batched(points)
    vol = volume[None] if volume.ndim == 4 else volume
    if vol.shape[0] != pts.shape[0]:
        vol = vol.expand(pts.shape[0], *vol.shape[1:])
    grid = pts[:, None, None, :, :].to(vol.dtype)
    out = F.grid_sample(vol, grid, mode="bilinear", padding_mode="border", align_corners=False)
    out = out[:, :, 0, 0, :].transpose(1, 2)
    return out[0] if squeeze else out


def _sample_plane(plane: torch.Tensor, coords: torch.Tensor) -> torch.Tensor:
    # plane (B, C, rows, cols); coords (B, M, 2) as (col, row) in [-1, 1]
    out = F.grid_sample(plane, coords[:, None].to(plane.dtype), mode="bilinear",
                        padding_mode="border", align_corners=False)
    return out[:, :, 0, :].transpose(1, 2)


def sample_triplane(planes: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Sum of bilinear lookups on the xy, xz and yz planes.

    planes (B, 3, C, N, N) ordered as :data:`PLANE_ORDER`; each plane is indexed
    [row, col] with the column driven by the first of its two axes.
    """
    pts, squeeze = _batched(points)
    pl = planes[None] if planes.ndim == 4 else planes
    if pl.shape[0] != pts.shape[0]:
        pl = pl.expand(pts.shape[0], *pl.shape[1:])
    out = 0
    for i, name in enumerate(PLANE_ORDER):
        a, b = PLANE_AXES[name]
        out = out + _sample_plane(pl[:, i], pts[..., [a, b]])
    return out[0] if squeeze else out


def sample_floorplan(plan: torch.Tensor, points: torch.Tensor) -> torch.Tensor:
    """Bilinear lookup on the xz floorplan with the y coordinate appended as the last channel."""
    pts, squeeze = _batched(points)
    pl = plan[None] if plan.ndim == 3 else plan
    if pl.shape[0] != pts.shape[0]:
        pl = pl.expand(pts.shape[0], *pl.shape[1:])
    feats = _sample_plane(pl, pts[..., [0, 2]])
    out = torch.cat([feats, pts[..., 1:2].to(feats.dtype)], dim=-1)
    return out[0] if squeeze else out


class FieldDecoder(nn.Module):
    """One-hidden-layer MLP: features -> (density >= 0, appearance).

    Density goes through softplus; appearance through a sigmoid, so the first
    three channels are RGB in [0, 1].
    """

    def __init__(self, in_features: int, hidden: int = 64, feature_dim: int = 32):
        super().__init__()
        self.in_features = in_features
        self.feature_dim = feature_dim
        self.hidden = nn.Linear(in_features, hidden)
        self.out = nn.Linear(hidden, 1 + feature_dim)

    def forward(self, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        if features.shape[-1] != self.in_features:
            raise WidthMismatch(f"decoder expects width {self.in_features}, got {features.shape[-1]}")
        h = F.softplus(self.hidden(features))
        raw = self.out(h)
        density = F.softplus(raw[..., :1])
        appearance = torch.sigmoid(raw[..., 1:])
        return density, appearance


def decode_field(decoder: FieldDecoder, features: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    return decoder(features)


SAMPLERS = {
    "extrusion": sample_trilinear,
    "triplane": sample_triplane,
    "floorplan": sample_floorplan,
}


class NeuralField:
    """A generated representation bound to a decoder; callable on (B, M, 3) points."""

    def __init__(self, kind: str, representation: torch.Tensor, decoder: FieldDecoder):
        if kind not in SAMPLERS:
            raise ValueError(f"unknown field representation {kind!r}")
        self.kind = kind
        self.representation = representation
        self.decoder = decoder

    @property
    def batch_size(self) -> int:
        return self.representation.shape[0]

    def features(self, points: torch.Tensor) -> torch.Tensor:
        return SAMPLERS[self.kind](self.representation, points)

    def __call__(self, points: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.decoder(self.features(points))
