"""2D semantic layouts: scene boxes, rasterization, channel encoding and edits.

Floorplan convention: x runs along grid columns, z along grid rows, y is up.
Pixel ``(row, col)`` has its center at ``x = -1 + (col + 0.5) * 2 / N`` and
``z = -1 + (row + 0.5) * 2 / N``.
"""
from __future__ import annotations

import configparser
import dataclasses
import io
import math
from dataclasses import dataclass

import numpy as np
import shapely
import shapely.ops
import torch
from shapely.geometry import Polygon

from .errors import EmptyScene, OutOfRoom, ResolutionTooLow, UnknownInstance

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class Box:
    """An oriented semantic box resting on the floor (y = -1)."""

    class_id: int
    center: tuple[float, float]  # (x, z)
    size: tuple[float, float]  # full extents along the box's own u / v axes
    orientation: float = 0.0  # rotation about +y, radians
    height: float = 0.5

    def axes(self) -> tuple[np.ndarray, np.ndarray]:
        c, s = math.cos(self.orientation), math.sin(self.orientation)
        return np.array([c, s]), np.array([-s, c])

    def corners(self) -> np.ndarray:
        """Floorplan corners (4, 2) in (x, z), counter-clockwise from the local origin."""
        u, v = self.axes()
        hu, hv = self.size[0] / 2, self.size[1] / 2
        c = np.asarray(self.center, dtype=np.float64)
        return np.stack([
            c - hu * u - hv * v,
            c + hu * u - hv * v,
            c + hu * u + hv * v,
            c - hu * u + hv * v,
        ])

    def polygon(self) -> Polygon:
        return Polygon(self.corners())

    @property
    def area(self) -> float:
        return float(self.size[0] * self.size[1])


@dataclass(frozen=True)
class SceneDescription:
    boxes: tuple[Box, ...]
    room_polygon: tuple[tuple[float, float], ...]
    class_count: int

    def __post_init__(self):
        object.__setattr__(self, "boxes", tuple(self.boxes))
        object.__setattr__(self, "room_polygon", tuple(tuple(map(float, p)) for p in self.room_polygon))
        room = self.room()
        for b in self.boxes:
            if not 1 <= b.class_id <= self.class_count:
                raise ValueError(f"class_id {b.class_id} outside [1, {self.class_count}]")
            if b.size[0] <= 0 or b.size[1] <= 0 or b.height <= 0:
                raise ValueError(f"non-positive box extent: {b}")
            if not b.polygon().intersects(room):
                raise ValueError(f"box does not intersect the room: {b}")

    def room(self) -> Polygon:
        return Polygon(self.room_polygon)

    def instance(self, instance_id: int) -> Box:
        if not 1 <= instance_id <= len(self.boxes):
            raise UnknownInstance(f"no instance {instance_id} (scene has {len(self.boxes)} boxes)")
        return self.boxes[instance_id - 1]


def square_room(half_extent: float = 1.0) -> tuple[tuple[float, float], ...]:
    h = half_extent
    return ((-h, -h), (h, -h), (h, h), (-h, h))


@dataclass
class LayoutGrid:
    class_map: np.ndarray  # (N, N) int64, 0 = empty
    instance_map: np.ndarray  # (N, N) int64, 0 = none
    local_uv: np.ndarray  # (N, N, 2) float64 in [0, 1]
    orientation_map: np.ndarray  # (N, N) float64 in [0, 2*pi)
    room_mask: np.ndarray  # (N, N) bool
    class_count: int

    @property
    def resolution(self) -> int:
        return self.class_map.shape[0]

    def to_array(self) -> np.ndarray:
        """Stack into (N, N, 6): class, instance, u, v, orientation, room."""
        return np.stack([
            self.class_map.astype(np.float32),
            self.instance_map.astype(np.float32),
            self.local_uv[..., 0].astype(np.float32),
            self.local_uv[..., 1].astype(np.float32),
            self.orientation_map.astype(np.float32),
            self.room_mask.astype(np.float32),
        ], axis=-1)

    @classmethod
    def from_array(cls, arr: np.ndarray, class_count: int) -> "LayoutGrid":
        arr = np.asarray(arr)
        return cls(
            class_map=np.rint(arr[..., 0]).astype(np.int64),
            instance_map=np.rint(arr[..., 1]).astype(np.int64),
            local_uv=arr[..., 2:4].astype(np.float64),
            orientation_map=arr[..., 4].astype(np.float64),
            room_mask=arr[..., 5] > 0.5,
            class_count=class_count,
        )

    @classmethod
    def from_class_map(cls, class_map: np.ndarray, class_count: int) -> "LayoutGrid":
        """Wrap a pixel-based class map (no boxes). All occupied pixels share instance 1."""
        class_map = np.asarray(class_map, dtype=np.int64)
        n = class_map.shape[0]
        occupied = class_map > 0
        return cls(
            class_map=class_map,
            instance_map=occupied.astype(np.int64),
            local_uv=np.zeros((n, n, 2)),
            orientation_map=np.zeros((n, n)),
            room_mask=np.ones((n, n), dtype=bool),
            class_count=class_count,
        )


def pixel_centers(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (x, z) center coordinates, each (N, N), indexed [row, col]."""
    c = -1.0 + (np.arange(n) + 0.5) * (2.0 / n)
    x, z = np.meshgrid(c, c, indexing="xy")
    return x, z


def box_local_coords(box: Box, x: np.ndarray, z: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Canonical (u, v) in [0, 1] with the origin at the box's left-top corner, plus inside mask."""
    u_ax, v_ax = box.axes()
    dx, dz = x - box.center[0], z - box.center[1]
    a = dx * u_ax[0] + dz * u_ax[1]
    b = dx * v_ax[0] + dz * v_ax[1]
    hu, hv = box.size[0] / 2, box.size[1] / 2
    inside = (np.abs(a) <= hu) & (np.abs(b) <= hv)
    return (a + hu) / box.size[0], (b + hv) / box.size[1], inside


def paint_order(scene: SceneDescription) -> list[int]:
    """Instance ids in painting order: larger footprints first, ties by id."""
    return sorted(range(1, len(scene.boxes) + 1), key=lambda i: (-scene.boxes[i - 1].area, i))


def rasterize_layout(scene: SceneDescription, n: int) -> LayoutGrid:
    if n < 8:
        raise ResolutionTooLow(f"resolution {n} < 8")
    if not scene.boxes:
        raise EmptyScene("scene has no boxes")
    x, z = pixel_centers(n)
    class_map = np.zeros((n, n), dtype=np.int64)
    instance_map = np.zeros((n, n), dtype=np.int64)
    local_uv = np.zeros((n, n, 2))
    orientation_map = np.zeros((n, n))
    for inst in paint_order(scene):
        box = scene.boxes[inst - 1]
        u, v, inside = box_local_coords(box, x, z)
        if not inside.any():
            raise ResolutionTooLow(f"instance {inst} covers no pixel at N={n}")
        class_map[inside] = box.class_id
        instance_map[inside] = inst
        local_uv[inside, 0] = np.clip(u[inside], 0.0, 1.0)
        local_uv[inside, 1] = np.clip(v[inside], 0.0, 1.0)
        orientation_map[inside] = box.orientation % TWO_PI
    room_mask = shapely.contains_xy(scene.room(), x, z) | (class_map > 0)
    return LayoutGrid(class_map, instance_map, local_uv, orientation_map, room_mask, scene.class_count)


def structure_channels(grid: LayoutGrid) -> np.ndarray:
    """The latent-free part of the layout tensor, (4 + S, N, N) float32 channels-first."""
    n, s = grid.resolution, grid.class_count
    occupied = grid.class_map > 0
    out = np.zeros((4 + s, n, n), dtype=np.float32)
    out[0] = grid.room_mask
    out[1] = grid.local_uv[..., 0] * occupied
    out[2] = grid.local_uv[..., 1] * occupied
    out[3] = grid.orientation_map / TWO_PI * occupied
    rows, cols = np.nonzero(occupied)
    out[4 + grid.class_map[rows, cols] - 1, rows, cols] = 1.0
    return out


def encode_layout(grid: LayoutGrid, latent) -> torch.Tensor:
    """Build the (L, N, N) layout tensor, L = 1 + 3 + S + D.

    Channel blocks are [room mask | u, v, orientation / 2pi | one-hot classes | latent].
    ``latent`` may be a tensor requiring grad; the result stays differentiable in it.
    """
    latent = torch.as_tensor(latent)
    if latent.ndim != 1 or latent.numel() < 1:
        raise ValueError("latent must be a non-empty vector")
    struct = torch.from_numpy(structure_channels(grid)).to(latent.dtype)
    return concat_latent(struct[None], latent[None])[0]


def concat_latent(structure: torch.Tensor, z: torch.Tensor) -> torch.Tensor:
    """Batched form: (B, 4+S, N, N) and (B, D) -> (B, 4+S+D, N, N)."""
    b, _, h, w = structure.shape
    return torch.cat([structure, z[:, :, None, None].expand(b, z.shape[1], h, w)], dim=1)


def topdown_labels(grid: LayoutGrid) -> np.ndarray:
    return grid.class_map.copy()


@dataclass(frozen=True)
class LayoutEdit:
    kind: str  # "remove" | "translate" | "restyle"
    target: int | None = None
    translation: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.kind not in ("remove", "translate", "restyle"):
            raise ValueError(f"unknown edit kind {self.kind!r}")


def apply_edit(scene: SceneDescription, edit: LayoutEdit) -> SceneDescription:
    if edit.kind == "restyle":
        return scene
    box = scene.instance(edit.target)
    idx = edit.target - 1
    if edit.kind == "remove":
        boxes = scene.boxes[:idx] + scene.boxes[idx + 1:]
        return dataclasses.replace(scene, boxes=boxes)
    dx, dz = edit.translation
    moved = dataclasses.replace(box, center=(box.center[0] + dx, box.center[1] + dz))
    room = scene.room()
    if not moved.polygon().intersects(room):
        raise OutOfRoom(f"instance {edit.target} would leave the room")
    cx, cz = moved.center
    if not room.covers(shapely.Point(cx, cz)):
        near = shapely.ops.nearest_points(room, shapely.Point(cx, cz))[0]
        cx, cz = near.x, near.y
    moved = dataclasses.replace(moved, center=(float(cx), float(cz)))
    boxes = scene.boxes[:idx] + (moved,) + scene.boxes[idx + 1:]
    return dataclasses.replace(scene, boxes=boxes)


# -- structured-text serialization ------------------------------------------

def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split()]


def dumps_scene(scene: SceneDescription) -> str:
    cp = configparser.ConfigParser()
    cp["scene"] = {
        "class_count": str(scene.class_count),
        "room": "; ".join(f"{x!r} {z!r}" for x, z in scene.room_polygon),
    }
    for i, b in enumerate(scene.boxes, start=1):
        cp[f"box {i}"] = {
            "class_id": str(b.class_id),
            "center": f"{b.center[0]!r} {b.center[1]!r}",
            "size": f"{b.size[0]!r} {b.size[1]!r}",
            "orientation": repr(b.orientation),
            "height": repr(b.height),
        }
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def loads_scene(text: str) -> SceneDescription:
    cp = configparser.ConfigParser()
    cp.read_string(text)
    head = cp["scene"]
    room = tuple(tuple(_floats(p)) for p in head["room"].split(";"))
    names = sorted((s for s in cp.sections() if s.startswith("box ")), key=lambda s: int(s.split()[1]))
    boxes = []
    for name in names:
        sec = cp[name]
        boxes.append(Box(
            class_id=int(sec["class_id"]),
            center=tuple(_floats(sec["center"])),
            size=tuple(_floats(sec["size"])),
            orientation=float(sec["orientation"]),
            height=float(sec["height"]),
        ))
    return SceneDescription(tuple(boxes), room, int(head["class_count"]))


def save_scene(scene: SceneDescription, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_scene(scene))


def load_scene(path) -> SceneDescription:
    with open(path, encoding="utf-8") as f:
        return loads_scene(f.read())


def occupied_centroid(grid: LayoutGrid, instance_id: int | None = None) -> np.ndarray:
    """(col, row) centroid of occupied pixels, optionally for one instance."""
    mask = grid.class_map > 0 if instance_id is None else grid.instance_map == instance_id
    rows, cols = np.nonzero(mask)
    return np.array([cols.mean(), rows.mean()])
