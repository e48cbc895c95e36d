"""Command-line entry points: make-dataset, train, render, edit, eval.

Exit codes: 0 success, 1 runtime failure, 2 usage error. ``CC3D_NUM_THREADS``
caps torch's intra-op thread count.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import ABLATIONS, ExperimentConfig, load_config
from .errors import NonFiniteLoss, SceneGanError
from .layout import LayoutEdit, LayoutGrid, apply_edit, load_scene, rasterize_layout, structure_channels
from .renderer import CameraPose
from .tensorio import read_tensor

THREADS_ENV = "CC3D_NUM_THREADS"


class UsageError(Exception):
    pass


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    return path


def _save_png(img: torch.Tensor, path: Path) -> None:
    arr = img.detach().clamp(0, 1).permute(1, 2, 0).numpy()
    Image.fromarray(np.rint(arr * 255).astype(np.uint8)).save(path)


# -- commands ----------------------------------------------------------------

def cmd_make_dataset(args) -> int:
    from .dataset import build_dataset, read_manifest, spec_from_config

    cfg = load_config(_require(args.config, "config"))
    if args.seed is not None:
        cfg.dataset.seed = args.seed
    d = cfg.dataset
    manifest = build_dataset(spec_from_config(cfg), d.n_scenes, d.poses_per_scene, args.out_dir,
                             seed=d.seed, image_size=d.image_size)
    info = read_manifest(manifest)
    print(f"scenes={len(info['scenes'])} discarded={info['discarded']} sha256={info['dataset_sha256']}")
    return 0


def _load_dataset(cfg: ExperimentConfig, data_dir: Path):
    from .dataset import SceneDataset, spec_from_config

    _require(data_dir / "manifest.txt", "dataset manifest")
    return SceneDataset(data_dir, spec_from_config(cfg))


def cmd_train(args) -> int:
    from .training import build_state, load_state, train

    if args.resume is not None:
        state = load_state(_require(args.resume, "checkpoint"))
        cfg = state.config
    else:
        cfg = load_config(_require(args.config, "config")).with_ablation(args.ablation)
        if args.seed is not None:
            cfg.train.seed = args.seed
        state = build_state(cfg)
    dataset = _load_dataset(cfg, args.data_dir)
    try:
        paths = train(state, dataset, args.out_dir, max_images=args.max_images)
    except NonFiniteLoss as exc:
        print(f"error: {exc}; diagnostics at {exc.dump_path}", file=sys.stderr)
        return 1
    print(f"steps={state.step} images={state.images_seen} checkpoints={len(paths)}")
    return 0


def _load_generator(path: Path):
    from .training import load_state

    state = load_state(_require(path, "checkpoint"))
    state.generator.eval()
    return state


def _read_layout(path: Path, cfg: ExperimentConfig):
    """(scene or None, grid) from a scene description or a layout tensor file."""
    _require(path, "layout file")
    if path.suffix == ".bin":
        return None, LayoutGrid.from_array(read_tensor(path), cfg.generator.class_count)
    scene = load_scene(path)
    return scene, rasterize_layout(scene, cfg.generator.resolution)


def _camera_path(spec: str, scene, grid, cfg: ExperimentConfig, frames: int, seed: int) -> list[CameraPose]:
    from .training import build_camera_prior, sample_camera

    c = cfg.camera
    if spec == "prior":
        if scene is None:
            raise UsageError("--camera-path prior needs a scene description, not a layout tensor")
        prior = build_camera_prior(grid, scene, c.tau, c.height, c.fov_deg, c.dominant_class)
        rng = np.random.default_rng([seed, 0xCA3])
        return [sample_camera(grid, scene, prior, rng) for _ in range(frames)]
    if spec == "orbit":
        fov = math.radians(c.fov_deg)
        return [CameraPose((0.7 * math.cos(a), c.height, 0.7 * math.sin(a)), (0.0, -0.7, 0.0), fov=fov)
                for a in np.linspace(0, 2 * math.pi, frames, endpoint=False)]
    path = _require(Path(spec), "camera path file")
    return [CameraPose.from_list(line.split()) for line in path.read_text().splitlines() if line.strip()]


def _render_frames(state, grid, cams, seed: int, out_dir: Path, prefix: str, depth: bool = False,
                   z: torch.Tensor | None = None) -> list[Path]:
    from .evaluation import export_depth
    from .training import synthesize

    cfg = state.config
    gen = state.generator
    if z is None:
        z = torch.randn((1, cfg.generator.style_dim), generator=torch.Generator().manual_seed(seed))
    structure = torch.from_numpy(structure_channels(grid))[None]
    written = []
    with torch.no_grad():
        for k, cam in enumerate(cams):
            final, _, rep = synthesize(gen, structure, z, [cam], cfg, seed * 7919 + k,
                                       conditioning=cfg.train.layout_conditioning)
            path = out_dir / f"{prefix}_{k:03d}.png"
            _save_png(final[0], path)
            written.append(path)
            if depth:
                t = cfg.train
                export_depth(gen.field(rep), cam, out_dir / f"depth_{k:03d}", t.render_resolution,
                             t.render_resolution, seed * 7919 + k, t.n_coarse, t.n_fine)
    return written


def cmd_render(args) -> int:
    state = _load_generator(args.checkpoint)
    seed = args.seed or 0
    scene, grid = _read_layout(args.layout_file, state.config)
    cams = _camera_path(args.camera_path, scene, grid, state.config, args.frames, seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    paths = _render_frames(state, grid, cams, seed, args.out_dir, "frame", depth=args.depth)
    print(f"frames={len(paths)} out={args.out_dir}")
    return 0


def parse_edit(text: str) -> LayoutEdit:
    """``remove ID`` | ``translate ID DX DZ`` | ``restyle``; a file holding one of these also works."""
    p = Path(text)
    if p.exists():
        text = p.read_text()
    parts = text.split()
    if not parts:
        raise UsageError("empty edit spec")
    kind = parts[0]
    try:
        if kind == "remove" and len(parts) == 2:
            return LayoutEdit("remove", int(parts[1]))
        if kind == "translate" and len(parts) == 4:
            return LayoutEdit("translate", int(parts[1]), (float(parts[2]), float(parts[3])))
        if kind == "restyle" and len(parts) == 1:
            return LayoutEdit("restyle")
    except ValueError as exc:
        raise UsageError(f"bad edit spec {text!r}: {exc}") from exc
    raise UsageError(f"bad edit spec {text!r}")


def cmd_edit(args) -> int:
    state = _load_generator(args.checkpoint)
    cfg = state.config
    seed = args.seed or 0
    scene, grid = _read_layout(args.layout_file, cfg)
    if scene is None:
        raise UsageError("edits need a scene description")
    edit = parse_edit(args.edit_spec)
    edited = apply_edit(scene, edit)
    grid_after = rasterize_layout(edited, cfg.generator.resolution)
    cams = _camera_path(args.camera_path, scene, grid, cfg, 1, seed)
    args.out_dir.mkdir(parents=True, exist_ok=True)
    z = torch.randn((1, cfg.generator.style_dim), generator=torch.Generator().manual_seed(seed))
    z_after = z
    if edit.kind == "restyle":
        z_after = torch.randn((1, cfg.generator.style_dim), generator=torch.Generator().manual_seed(seed + 1))
    _render_frames(state, grid, cams, seed, args.out_dir, "before", z=z)
    _render_frames(state, grid_after, cams, seed, args.out_dir, "after", z=z_after)
    changed = int((grid.class_map != grid_after.class_map).sum())
    (args.out_dir / "edit.json").write_text(json.dumps(
        {"edit": edit.kind, "target": edit.target, "translation": list(edit.translation),
         "changed_layout_pixels": changed, "seed": seed}, indent=1))
    print(f"edit={edit.kind} changed_layout_pixels={changed}")
    return 0


def _image_dir(path: Path, n: int | None) -> torch.Tensor:
    files = sorted(path.rglob("*.png"))
    if not files:
        raise UsageError(f"no PNG images under {path}")
    if n is not None:
        files = files[:n]
    arr = np.stack([np.asarray(Image.open(f).convert("RGB")) for f in files])
    return torch.from_numpy(arr).permute(0, 3, 1, 2).float() / 255.0


def cmd_eval(args) -> int:
    from . import evaluation as ev

    seed = args.seed or 0
    if args.checkpoint is None and args.images is None:
        raise UsageError("eval needs --checkpoint or --images")
    _require(args.data_dir, "data directory")
    state = _load_generator(args.checkpoint) if args.checkpoint is not None else None
    cfg = state.config if state is not None else ExperimentConfig()
    n = args.n or cfg.eval.n_samples
    extra = {}
    if args.metric == "iou":
        if state is None:
            raise UsageError("--metric iou needs --checkpoint")
        dataset = _load_dataset(cfg, args.data_dir)
        res = ev.layout_iou_probe(state, dataset, probe_seed=seed, split=cfg.eval.split,
                                  steps=cfg.eval.probe_steps)
        value = res.pop("miou")
        res.pop("seed")  # equals the record's own seed
        extra = res
        n = dataset.n_scenes
    else:
        if (args.data_dir / "manifest.txt").exists():
            dataset = _load_dataset(cfg, args.data_dir)
            ref = ev.real_images(dataset, n, seed)
        else:
            dataset = None
            ref = _image_dir(args.data_dir, n)
        if state is not None:
            if dataset is None:
                raise UsageError("generated-sample evaluation needs a dataset directory for layouts")
            other = ev.generated_images(state, dataset, n, seed)
        else:
            other = _image_dir(_require(args.images, "image directory"), n)
        emb = ev.get_embedder(cfg.eval.embedder)
        fa, fb = ev.embed_images(other, emb), ev.embed_images(ref, emb)
        if args.metric == "fid":
            value = ev.frechet_distance(ev.FeatureStats.from_features(fa), ev.FeatureStats.from_features(fb))
        else:
            value = ev.kernel_distance(fa, fb)
            extra = {"kid_scale": "raw MMD^2 (not multiplied by 1e3)"}
        n = min(len(fa), len(fb))
    record = ev.metric_record(args.metric, value, n, seed, cfg.eval.embedder, **extra)
    line = json.dumps(record, sort_keys=True)
    if args.out is not None:
        args.out.write_text(line + "\n")
    print(line)
    return 0


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scenegan", description="Layout-conditioned 3D scene GAN toolkit.")
    p.add_argument("--seed", type=int, default=None, help="global seed for every command")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("make-dataset", help="generate the procedural toy dataset")
    s.add_argument("config", type=Path)
    s.add_argument("out_dir", type=Path)
    s.set_defaults(func=cmd_make_dataset)

    s = sub.add_parser("train", help="train a generator/discriminator pair")
    s.add_argument("config", type=Path)
    s.add_argument("data_dir", type=Path)
    s.add_argument("out_dir", type=Path)
    s.add_argument("--ablation", choices=ABLATIONS, default="none")
    s.add_argument("--resume", type=Path, help="continue from this checkpoint (config is taken from it)")
    s.add_argument("--max-images", type=int, help="stop early after this many images")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render a layout from a checkpoint")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("layout_file", type=Path, help="scene.txt or layout.bin")
    s.add_argument("out_dir", type=Path)
    s.add_argument("--camera-path", default="prior", help="'prior', 'orbit' or a cameras.txt file")
    s.add_argument("--frames", type=int, default=4)
    s.add_argument("--depth", action="store_true", help="also write one depth file per frame")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("edit", help="apply a layout edit and render before/after")
    s.add_argument("checkpoint", type=Path)
    s.add_argument("layout_file", type=Path)
    s.add_argument("edit_spec", help="'remove ID', 'translate ID DX DZ', 'restyle' or a file")
    s.add_argument("out_dir", type=Path)
    s.add_argument("--camera-path", default="prior")
    s.set_defaults(func=cmd_edit)

    s = sub.add_parser("eval", help="FID/KID proxies or the layout IoU probe")
    s.add_argument("data_dir", type=Path, help="dataset root or a directory of reference PNGs")
    s.add_argument("--metric", choices=("fid", "kid", "iou"), required=True)
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--images", type=Path, help="compare this PNG directory instead of generated samples")
    s.add_argument("--n", type=int, help="sample count (default from config)")
    s.add_argument("--out", type=Path, help="write the report record here")
    s.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    threads = os.environ.get(THREADS_ENV)
    if threads:
        torch.set_num_threads(max(1, int(threads)))
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (SceneGanError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
