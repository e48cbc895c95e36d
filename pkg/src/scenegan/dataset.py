"""Procedural toy rooms, an analytic ray-box reference renderer and the on-disk dataset."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
from PIL import Image
from shapely import Polygon

from .errors import NoValidCamera, PlacementFailure
from .layout import Box, LayoutGrid, SceneDescription, load_scene, rasterize_layout, save_scene, structure_channels
from .renderer import WHITE, CameraPose, make_rays
from .tensorio import read_tensor, write_tensor
from .training import CameraPrior, build_camera_prior, sample_camera


@dataclass(frozen=True)
class ClassStyle:
    color: tuple[float, float, float]
    size_u: tuple[float, float]
    size_v: tuple[float, float]
    height: tuple[float, float]


# A bedroom-like palette: class 1 is the dominant bed.
DEFAULT_PALETTE = {
    1: ClassStyle((0.80, 0.25, 0.20), (0.45, 0.65), (0.70, 0.95), (0.35, 0.50)),
    2: ClassStyle((0.20, 0.35, 0.80), (0.40, 0.70), (0.20, 0.30), (0.90, 1.20)),
    3: ClassStyle((0.25, 0.65, 0.30), (0.18, 0.28), (0.18, 0.28), (0.25, 0.40)),
    4: ClassStyle((0.90, 0.75, 0.20), (0.35, 0.55), (0.25, 0.35), (0.40, 0.55)),
}


@dataclass(frozen=True)
class ToySceneSpec:
    room_half: tuple[float, float] = (0.75, 1.0)
    box_count: tuple[int, int] = (2, 4)
    palette: dict = field(default_factory=lambda: dict(DEFAULT_PALETTE))
    dominant_class: int = 1
    resolution: int = 32
    pose_quota: int = 40
    tau: float = 4.0
    camera_height: float = 0.35
    fov_deg: float = 60.0
    gap: float = 0.05
    max_retries: int = 200

    def __post_init__(self):
        if self.box_count[0] < 1 or self.box_count[1] < self.box_count[0]:
            raise ValueError("box count range must satisfy 1 <= lo <= hi")
        for style in self.palette.values():
            if not all(0.0 <= c <= 1.0 for c in style.color):
                raise ValueError("palette colors must lie in [0, 1]")

    @property
    def class_count(self) -> int:
        return len(self.palette)

    def colors(self) -> dict[int, tuple[float, float, float]]:
        return {k: v.color for k, v in self.palette.items()}


def spec_from_config(cfg) -> ToySceneSpec:
    """Toy scene spec from an experiment config's dataset and camera sections."""
    d, c = cfg.dataset, cfg.camera
    return ToySceneSpec(room_half=(d.room_half_min, d.room_half_max), box_count=(d.min_boxes, d.max_boxes),
                        resolution=cfg.generator.resolution, pose_quota=d.pose_quota, tau=c.tau,
                        camera_height=c.height, fov_deg=c.fov_deg, dominant_class=c.dominant_class)


def _place(spec: ToySceneSpec, rng) -> SceneDescription:
    hx, hz = rng.uniform(*spec.room_half, size=2)
    room = ((-hx, -hz), (hx, -hz), (hx, hz), (-hx, hz))
    room_poly = Polygon(room)
    n_boxes = int(rng.integers(spec.box_count[0], spec.box_count[1] + 1))
    others = [c for c in sorted(spec.palette) if c != spec.dominant_class]
    classes = [spec.dominant_class] + [int(rng.choice(others)) for _ in range(n_boxes - 1)]
    boxes: list[Box] = []
    for cls in classes:
        style = spec.palette[cls]
        for _ in range(50):
            size = (rng.uniform(*style.size_u), rng.uniform(*style.size_v))
            box = Box(cls, (rng.uniform(-hx, hx), rng.uniform(-hz, hz)), size,
                      orientation=float(rng.integers(4)) * math.pi / 2,
                      height=float(rng.uniform(*style.height)))
            poly = box.polygon()
            if room_poly.contains(poly) and all(poly.distance(b.polygon()) > spec.gap for b in boxes):
                boxes.append(box)
                break
        else:
            raise PlacementFailure(f"could not place a class-{cls} box")
    return SceneDescription(tuple(boxes), room, spec.class_count)


def generate_scene(spec: ToySceneSpec, rng) -> tuple[SceneDescription, int]:
    """Rejection-sample a scene meeting the pose quota; also returns the number of rejects."""
    for attempt in range(spec.max_retries):
        try:
            scene = _place(spec, rng)
        except PlacementFailure:
            continue
        if camera_prior(scene, spec).n_positions >= spec.pose_quota:
            return scene, attempt
    raise PlacementFailure(f"no scene met the pose quota in {spec.max_retries} attempts")


def make_toy_scene(spec: ToySceneSpec, rng) -> SceneDescription:
    return generate_scene(spec, rng)[0]


def camera_prior(scene: SceneDescription, spec: ToySceneSpec) -> CameraPrior:
    grid = rasterize_layout(scene, spec.resolution)
    return build_camera_prior(grid, scene, spec.tau, spec.camera_height, spec.fov_deg, spec.dominant_class)


# -- reference renderer ------------------------------------------------------

LIGHT = np.array([0.3, 1.0, 0.5]) / np.linalg.norm([0.3, 1.0, 0.5])
AMBIENT = 0.35
DIFFUSE = 0.65


def ray_box_hits(box: Box, origins: np.ndarray, dirs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Entry distance (inf on miss) and world-space entry normal for rays against one box."""
    u, v = box.axes()
    c = np.asarray(box.center)
    rel = origins[:, [0, 2]] - c
    o = np.stack([rel @ u, origins[:, 1], rel @ v], axis=1)
    d = np.stack([dirs[:, [0, 2]] @ u, dirs[:, 1], dirs[:, [0, 2]] @ v], axis=1)
    lo = np.array([-box.size[0] / 2, -1.0, -box.size[1] / 2])
    hi = np.array([box.size[0] / 2, -1.0 + box.height, box.size[1] / 2])
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (lo - o) / d
        t1 = (hi - o) / d
    par = d == 0
    inside = (o >= lo) & (o <= hi)
    tmin = np.where(par, np.where(inside, -np.inf, np.inf), np.minimum(t0, t1))
    tmax = np.where(par, np.where(inside, np.inf, -np.inf), np.maximum(t0, t1))
    axis = np.argmax(tmin, axis=1)
    near = tmin[np.arange(len(o)), axis]
    far = tmax.min(axis=1)
    hit = (far >= near) & (near > 0)
    sign = -np.sign(d[np.arange(len(o)), axis])
    world_axes = np.array([[u[0], 0.0, u[1]], [0.0, 1.0, 0.0], [v[0], 0.0, v[1]]])
    normals = world_axes[axis] * sign[:, None]
    return np.where(hit, near, np.inf), normals


def render_reference_rays(scene: SceneDescription, origins, dirs, colors=None) -> np.ndarray:
    """Nearest-hit Lambertian shading over a white background; (R, 3) float64."""
    if colors is None:
        colors = {k: v.color for k, v in DEFAULT_PALETTE.items()}
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    best = np.full(len(origins), np.inf)
    out = np.full((len(origins), 3), WHITE)
    for box in scene.boxes:
        t, normals = ray_box_hits(box, origins, dirs)
        closer = t < best
        shade = AMBIENT + DIFFUSE * np.clip(normals @ LIGHT, 0.0, None)
        out[closer] = np.asarray(colors[box.class_id])[None] * shade[closer, None]
        best = np.where(closer, t, best)
    return out


def render_reference(scene: SceneDescription, camera: CameraPose, h: int, w: int, colors=None) -> np.ndarray:
    """(H, W, 3) float64 image in [0, 1]."""
    o, d = make_rays(camera, h, w)
    return render_reference_rays(scene, o.numpy(), d.numpy(), colors).reshape(h, w, 3)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img) * 255.0), 0, 255).astype(np.uint8)


# -- on-disk dataset ---------------------------------------------------------

def _sha(paths: list[Path]) -> str:
    h = hashlib.sha256()
    for p in paths:
        h.update(p.name.encode())
        h.update(p.read_bytes())
    return h.hexdigest()


def sample_poses(scene: SceneDescription, spec: ToySceneSpec, n: int, rng) -> list[CameraPose]:
    """``n`` poses at distinct valid cells."""
    grid = rasterize_layout(scene, spec.resolution)
    prior = build_camera_prior(grid, scene, spec.tau, spec.camera_height, spec.fov_deg, spec.dominant_class)
    if prior.n_positions < n:
        raise NoValidCamera(f"only {prior.n_positions} valid positions, need {n}")
    picks = rng.choice(prior.n_positions, size=n, replace=False)
    poses = []
    for k in picks:
        sub = CameraPrior(prior.cells[k:k + 1], prior.height, prior.target_instance, prior.fov, prior.tau)
        poses.append(sample_camera(grid, scene, sub, rng))
    return poses


def build_dataset(spec: ToySceneSpec, n_scenes: int, poses_per_scene: int, out_dir, seed: int = 0,
                  image_size: int = 64) -> Path:
    """Write scenes, layouts, cameras, PNG images and a hashed manifest; returns the manifest path."""
    if n_scenes < 1:
        raise ValueError("n_scenes must be >= 1")
    if poses_per_scene < spec.pose_quota:
        raise ValueError("poses_per_scene must meet the pose quota")
    root = Path(out_dir)
    (root / "scenes").mkdir(parents=True, exist_ok=True)
    lines = []
    discarded = 0
    colors = spec.colors()
    for i in range(n_scenes):
        rng = np.random.default_rng([seed, i])
        scene, rejects = generate_scene(spec, rng)
        discarded += rejects
        sid = f"{i:05d}"
        d = root / "scenes" / sid
        d.mkdir(exist_ok=True)
        save_scene(scene, d / "scene.txt")
        write_tensor(d / "layout.bin", rasterize_layout(scene, spec.resolution).to_array())
        poses = sample_poses(scene, spec, poses_per_scene, rng)
        (d / "cameras.txt").write_text("".join(" ".join(repr(v) for v in p.to_list()) + "\n" for p in poses))
        files = [d / "scene.txt", d / "layout.bin", d / "cameras.txt"]
        for k, pose in enumerate(poses):
            img = to_uint8(render_reference(scene, pose, image_size, image_size, colors))
            path = d / f"img_{k:03d}.png"
            Image.fromarray(img).save(path, optimize=False)
            files.append(path)
        lines.append(f"scene {sid} poses={len(poses)} sha256={_sha(files)}")
    head = [
        "# toy scene dataset manifest",
        "format = 1",
        f"seed = {seed}",
        f"n_scenes = {n_scenes}",
        f"poses_per_scene = {poses_per_scene}",
        f"pose_quota = {spec.pose_quota}",
        f"resolution = {spec.resolution}",
        f"image_size = {image_size}",
        f"class_count = {spec.class_count}",
        f"discarded = {discarded}",
    ]
    body = "\n".join(lines)
    total = hashlib.sha256(body.encode()).hexdigest()
    manifest = root / "manifest.txt"
    manifest.write_text("\n".join(head + lines + [f"dataset_sha256 = {total}"]) + "\n")
    return manifest


def read_manifest(path) -> dict:
    info: dict = {"scenes": []}
    for line in Path(path).read_text().splitlines():
        if not line or line.startswith("#"):
            continue
        if line.startswith("scene "):
            parts = line.split()
            info["scenes"].append({"id": parts[1], **dict(p.split("=", 1) for p in parts[2:])})
        else:
            k, v = (s.strip() for s in line.split("=", 1))
            info[k] = v
    return info


class SceneDataset:
    """In-memory view of a built dataset.

    Layouts and real images are indexed separately so training can draw them
    independently, never as aligned pairs.
    """

    def __init__(self, root, spec: ToySceneSpec | None = None):
        self.root = Path(root)
        self.manifest = read_manifest(self.root / "manifest.txt")
        self.spec = spec or ToySceneSpec()
        ids = [s["id"] for s in self.manifest["scenes"]]
        self.scenes = [load_scene(self.root / "scenes" / i / "scene.txt") for i in ids]
        cc = int(self.manifest["class_count"])
        self.grids = [LayoutGrid.from_array(read_tensor(self.root / "scenes" / i / "layout.bin"), cc) for i in ids]
        self.structure = torch.from_numpy(np.stack([structure_channels(g) for g in self.grids]))
        self.labels = torch.from_numpy(np.stack([g.class_map for g in self.grids]))
        s = self.spec
        self.priors = [build_camera_prior(g, sc, s.tau, s.camera_height, s.fov_deg, s.dominant_class)
                       for g, sc in zip(self.grids, self.scenes)]
        images, owner = [], []
        for j, i in enumerate(ids):
            for p in sorted((self.root / "scenes" / i).glob("img_*.png")):
                images.append(np.asarray(Image.open(p).convert("RGB")))
                owner.append(j)
        self.images = np.stack(images)  # (M, H, W, 3) uint8
        self.image_scene = np.asarray(owner)

    @property
    def n_scenes(self) -> int:
        return len(self.scenes)

    @property
    def n_images(self) -> int:
        return len(self.images)

    def real_images(self, idx) -> torch.Tensor:
        arr = self.images[np.asarray(idx)]
        return torch.from_numpy(arr).permute(0, 3, 1, 2).float() / 255.0

    def sample_camera(self, scene_idx: int, rng) -> CameraPose:
        return sample_camera(self.grids[scene_idx], self.scenes[scene_idx], self.priors[scene_idx], rng)
