"""Toy-scale training protocol: main run plus the two layout ablations across seeds.

Each (arm, seed) run writes ``<out>/<arm>_s<seed>/results.json`` and is skipped
when that file exists, so the script can be interrupted and restarted. Partial
runs resume from their latest checkpoint.

    python scripts/toy_protocol.py --data runs/toy_data --out runs/protocol
"""
from __future__ import annotations

import argparse
import json
import math
import time
from pathlib import Path

import torch

from scenegan.config import ExperimentConfig, load_config
from scenegan.dataset import SceneDataset, build_dataset, spec_from_config
from scenegan.evaluation import fid_proxy, layout_iou_probe
from scenegan.training import build_state, load_state, train

ARMS = ("none", "no-layout-loss", "no-layout-cond")


def ensure_dataset(cfg: ExperimentConfig, root: Path) -> SceneDataset:
    spec = spec_from_config(cfg)
    if not (root / "manifest.txt").exists():
        d = cfg.dataset
        build_dataset(spec, d.n_scenes, d.poses_per_scene, root, seed=d.seed, image_size=d.image_size)
    return SceneDataset(root, spec)


def latest_checkpoint(run: Path) -> Path | None:
    ckpts = sorted(run.glob("ckpt_*.ckpt"))
    return ckpts[-1] if ckpts else None


def run_arm(base: ExperimentConfig, dataset, arm: str, seed: int, out: Path, budget: int | None) -> dict:
    run = out / f"{arm}_s{seed}"
    result_path = run / "results.json"
    if result_path.exists():
        return json.loads(result_path.read_text())
    run.mkdir(parents=True, exist_ok=True)
    cfg = base.with_ablation(arm)
    cfg.train.seed = seed
    if budget is not None:
        cfg.train.total_images = budget
    ev = cfg.eval
    partial = run / "partial.json"
    info = json.loads(partial.read_text()) if partial.exists() else {}
    ckpt = latest_checkpoint(run)
    if ckpt is None:
        state = build_state(cfg)
        info["fid_init"] = fid_proxy(state, dataset, ev.n_samples, seed=1000 + seed)
        info["train_seconds"] = 0.0
        info["train_cpu_seconds"] = 0.0
        partial.write_text(json.dumps(info))
    else:
        state = load_state(ckpt)
    start, cpu_start = time.time(), time.process_time()
    train(state, dataset, run, log=lambda m: m["step"] % 100 == 0 and print(arm, seed, m, flush=True))
    info["train_seconds"] = info.get("train_seconds", 0.0) + time.time() - start
    info["train_cpu_seconds"] = info.get("train_cpu_seconds", 0.0) + time.process_time() - cpu_start
    partial.write_text(json.dumps(info))
    metrics = [json.loads(x) for x in (run / "metrics.jsonl").read_text().splitlines()]
    scalar_keys = [k for k, v in metrics[0].items() if isinstance(v, float)]
    result = {
        "arm": arm,
        "seed": seed,
        "total_images": state.images_seen,
        "steps": state.step,
        "train_seconds": info["train_seconds"],
        "train_cpu_seconds": info["train_cpu_seconds"],
        "all_finite": all(math.isfinite(m[k]) for m in metrics for k in scalar_keys),
        "n_checkpoints": len(list(run.glob("ckpt_*.ckpt"))),
        "fid_init": info["fid_init"],
        "fid_final": fid_proxy(state, dataset, ev.n_samples, seed=1000 + seed),
        "eval_samples": ev.n_samples,
        "embedder": ev.embedder,
        "d_acc_last100": sum(m["d_acc"] for m in metrics[-100:]) / len(metrics[-100:]),
    }
    if arm in ("none", "no-layout-loss"):
        result["iou"] = layout_iou_probe(state, dataset, probe_seed=ev.probe_seed, split=ev.split,
                                         steps=ev.probe_steps)
    result_path.write_text(json.dumps(result, indent=1))
    return result


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", type=Path, help="experiment config; defaults are the toy protocol")
    p.add_argument("--data", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--arms", nargs="+", default=list(ARMS), choices=ARMS)
    p.add_argument("--total-images", type=int, help="override the image budget (pilots only)")
    p.add_argument("--threads", type=int, default=1)
    args = p.parse_args(argv)
    torch.set_num_threads(args.threads)
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    dataset = ensure_dataset(cfg, args.data)
    results = []
    for seed in args.seeds:
        for arm in args.arms:
            results.append(run_arm(cfg, dataset, arm, seed, args.out, args.total_images))
            print(json.dumps(results[-1]), flush=True)
    (args.out / "summary.json").write_text(json.dumps(results, indent=1))


if __name__ == "__main__":
    main()
