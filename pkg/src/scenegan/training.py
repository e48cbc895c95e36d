"""Camera prior, adversarial/R1/layout losses and the alternating training loop."""
from __future__ import annotations

import json
import math
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import distance_transform_edt

from .config import ExperimentConfig, dumps_config, from_dict, to_dict
from .discriminator import (Discriminator, build_topdown_summary, layout_loss, make_dual,
                            make_real_dual)
from .errors import NoValidCamera, NonFiniteLoss
from .generator import Generator
from .layout import LayoutGrid, SceneDescription, concat_latent, pixel_centers
from .neural_field import SAMPLERS
from .renderer import CameraPose, render
from .tensorio import flatten_optimizer, load_checkpoint, save_checkpoint, unflatten_optimizer


# -- camera prior ------------------------------------------------------------

def clearance_map(grid: LayoutGrid) -> np.ndarray:
    """Distance in cells from every free cell to the nearest obstacle.

    Boxes, cells outside the room and the area beyond the grid border all count
    as obstacles; obstacle cells get 0.
    """
    free = grid.room_mask & (grid.class_map == 0)
    padded = np.pad(free, 1, constant_values=False)
    return distance_transform_edt(padded)[1:-1, 1:-1]


def dominant_instance(scene: SceneDescription, dominant_class: int) -> int:
    """1-based id of the largest box of ``dominant_class``, else of the largest box."""
    ids = range(1, len(scene.boxes) + 1)
    of_class = [i for i in ids if scene.boxes[i - 1].class_id == dominant_class]
    pool = of_class or list(ids)
    return max(pool, key=lambda i: (scene.boxes[i - 1].area, -i))


@dataclass(frozen=True)
class CameraPrior:
    cells: np.ndarray  # (K, 2) valid (row, col)
    height: float
    target_instance: int
    fov: float
    tau: float

    @property
    def n_positions(self) -> int:
        return len(self.cells)


def build_camera_prior(grid: LayoutGrid, scene: SceneDescription, tau: float = 4.0, height: float = 0.35,
                       fov_deg: float = 60.0, dominant_class: int = 1) -> CameraPrior:
    dist = clearance_map(grid)
    cells = np.argwhere(dist >= tau)
    target = dominant_instance(scene, dominant_class) if scene.boxes else 0
    return CameraPrior(cells, float(height), target, math.radians(fov_deg), float(tau))


def sample_camera(grid: LayoutGrid, scene: SceneDescription, prior: CameraPrior, rng) -> CameraPose:
    """Uniform valid cell at constant height, looking at a uniform point in the dominant box."""
    if prior.n_positions == 0:
        raise NoValidCamera("no floorplan cell clears the distance threshold")
    row, col = prior.cells[rng.integers(prior.n_positions)]
    x, z = pixel_centers(grid.resolution)
    box = scene.instance(prior.target_instance)
    a, b, c = rng.random(3)
    u, v = box.axes()
    p = np.asarray(box.center) + (a - 0.5) * box.size[0] * u + (b - 0.5) * box.size[1] * v
    target = (float(p[0]), -1.0 + c * box.height, float(p[1]))
    position = (float(x[row, col]), prior.height, float(z[row, col]))
    return CameraPose(position, target, fov=prior.fov)


# -- losses ------------------------------------------------------------------

def adversarial_losses(logits_real, logits_fake):
    """Non-saturating logistic losses (loss_D, loss_G), batch means."""
    loss_d = F.softplus(logits_fake).mean() + F.softplus(-logits_real).mean()
    loss_g = F.softplus(-logits_fake).mean()
    return loss_d, loss_g


def r1_penalty(disc, real, gamma: float):
    """(gamma / 2) * E ||grad_x D(x)||^2 at real samples; differentiable in D's parameters."""
    real = real.detach().requires_grad_(True)
    out = disc(real)
    (grad,) = torch.autograd.grad(out.sum(), real, create_graph=True)
    return 0.5 * gamma * grad.square().flatten(1).sum(dim=1).mean()


def total_generator_loss(adv_g, layout, w_adv: float = 1.0, w_layout: float = 1.0):
    return w_adv * adv_g + w_layout * layout


def total_discriminator_loss(adv_d, r1, layout, w_adv: float = 1.0, w_r1: float = 1.0, w_layout: float = 1.0):
    return w_adv * adv_d + w_r1 * r1 + w_layout * layout


# -- state -------------------------------------------------------------------

@dataclass
class TrainState:
    config: ExperimentConfig
    generator: Generator
    discriminator: Discriminator
    opt_g: torch.optim.Optimizer
    opt_d: torch.optim.Optimizer
    step: int = 0
    images_seen: int = 0


def build_state(cfg: ExperimentConfig) -> TrainState:
    torch.manual_seed(cfg.train.seed)
    gen = Generator(cfg.generator)
    disc = Discriminator(cfg.disc_config())
    t = cfg.train
    opt_g = torch.optim.Adam(gen.parameters(), lr=t.lr_g, betas=(t.beta1, t.beta2), eps=t.eps)
    opt_d = torch.optim.Adam(disc.parameters(), lr=t.lr_d, betas=(t.beta1, t.beta2), eps=t.eps)
    return TrainState(cfg, gen, disc, opt_g, opt_d)


def save_state(state: TrainState, path) -> str:
    g_opt, g_extra = flatten_optimizer(state.opt_g.state_dict())
    d_opt, d_extra = flatten_optimizer(state.opt_d.state_dict())
    meta = {
        "config": to_dict(state.config),
        "config_text": dumps_config(state.config),
        "step": state.step,
        "images_seen": state.images_seen,
        "rng": {"seed": state.config.train.seed, "next_step": state.step},
        "opt_g": g_extra,
        "opt_d": d_extra,
    }
    modules = {
        "generator": dict(state.generator.state_dict()),
        "discriminator": dict(state.discriminator.state_dict()),
        "opt_g": g_opt,
        "opt_d": d_opt,
    }
    return save_checkpoint(path, modules, meta)


def load_state(path) -> TrainState:
    modules, meta = load_checkpoint(path)
    state = build_state(from_dict(meta["config"]))
    state.generator.load_state_dict(modules["generator"])
    state.discriminator.load_state_dict(modules["discriminator"])
    state.opt_g.load_state_dict(unflatten_optimizer(modules["opt_g"], meta["opt_g"]))
    state.opt_d.load_state_dict(unflatten_optimizer(modules["opt_d"], meta["opt_d"]))
    state.step = meta["step"]
    state.images_seen = meta["images_seen"]
    return state


# -- forward passes ----------------------------------------------------------

def step_rng(seed: int, step: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, step, stream])


def torch_gen(rng: np.random.Generator) -> torch.Generator:
    return torch.Generator().manual_seed(int(rng.integers(2**62)))


def synthesize(gen: Generator, structure, z, cameras, cfg: ExperimentConfig, render_seed: int,
               conditioning: bool = True):
    """Generate representations and render them. Returns (final, raw, representation)."""
    if not conditioning:
        structure = torch.zeros_like(structure)
    w = gen.map_style(z)
    rep = gen.to_representation(gen.unet_forward(concat_latent(structure, z), w))
    t = cfg.train
    out = render(gen.field(rep), cameras, t.render_resolution, t.render_resolution, render_seed,
                 n_coarse=t.n_coarse, n_fine=t.n_fine)
    final = gen.upsample_render(out.features, w)
    return final, out.rgb, rep


def topdown_summary(rep, cfg: ExperimentConfig, generator=None):
    g = cfg.generator
    return build_topdown_summary(rep, cfg.train.summary_k, cfg.summary_jitter, generator,
                                 resolution=g.resolution, sampler=SAMPLERS[g.representation])


def _grad_norm(params) -> float:
    sq = [p.grad.detach().square().sum() for p in params if p.grad is not None]
    return float(torch.stack(sq).sum().sqrt()) if sq else 0.0


@dataclass
class Batch:
    structure: torch.Tensor  # (B, 4+S, N, N)
    labels: torch.Tensor  # (B, N, N)
    cameras: list
    real: torch.Tensor  # (B, 3, H, W) in [0, 1]
    z: torch.Tensor
    render_seed: int
    jitter_seed: int


def make_batch(dataset, cfg: ExperimentConfig, step: int) -> Batch:
    """Layouts and real images drawn independently, fully determined by (seed, step)."""
    rng = step_rng(cfg.train.seed, step)
    b = cfg.train.batch_size
    scene_ids = rng.integers(dataset.n_scenes, size=b)
    image_ids = rng.integers(dataset.n_images, size=b)
    cameras = [dataset.sample_camera(int(i), rng) for i in scene_ids]
    z = torch.randn((b, cfg.generator.style_dim), generator=torch_gen(rng))
    return Batch(
        structure=dataset.structure[scene_ids],
        labels=dataset.labels[scene_ids],
        cameras=cameras,
        real=dataset.real_images(image_ids),
        z=z,
        render_seed=int(rng.integers(2**62)),
        jitter_seed=int(rng.integers(2**62)),
    )


def _check_finite(metrics: dict, state: TrainState, dump_dir) -> None:
    bad = [k for k, v in metrics.items() if isinstance(v, float) and not math.isfinite(v)]
    if not bad:
        return
    dump_dir = Path(dump_dir) if dump_dir else Path(tempfile.mkdtemp(prefix="nonfinite_"))
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / f"nonfinite_step{state.step:08d}.json"
    path.write_text(json.dumps({"bad": bad, "metrics": metrics, "step": state.step}, default=str))
    raise NonFiniteLoss(f"non-finite {', '.join(bad)} at step {state.step}", str(path))


def train_step(state: TrainState, batch: Batch, dump_dir=None) -> dict:
    """One discriminator update followed by one generator update on the same fakes."""
    cfg = state.config
    t = cfg.train
    gen, disc = state.generator, state.discriminator
    final, raw, rep = synthesize(gen, batch.structure, batch.z, batch.cameras, cfg, batch.render_seed,
                                 conditioning=t.layout_conditioning)
    fake_dual = make_dual(final, raw)
    real_dual = make_real_dual(batch.real, cfg.generator.upsample_factor)
    jitter = torch.Generator().manual_seed(batch.jitter_seed)
    summary = topdown_summary(rep, cfg, jitter)

    # discriminator
    disc.requires_grad_(True)
    state.opt_d.zero_grad(set_to_none=True)
    logits_fake = disc(fake_dual.detach())
    logits_real = disc(real_dual)
    adv_d, _ = adversarial_losses(logits_real, logits_fake)
    lazy = state.step % t.r1_interval == 0
    if lazy and t.w_r1 != 0:
        r1 = r1_penalty(disc, real_dual, t.r1_gamma)
    else:
        r1 = torch.zeros(())
    seg_d = layout_loss(disc.segment(summary.detach()), batch.labels)
    loss_d = total_discriminator_loss(adv_d, r1 * (t.r1_interval if lazy else 0), seg_d,
                                      t.w_adv, t.w_r1, t.w_layout)
    metrics = {
        "step": state.step,
        "images_seen": state.images_seen + t.batch_size,
        "loss_D": loss_d.item(),
        "loss_D_adv": adv_d.item(),
        "loss_R1": r1.item(),
        "loss_layout_D": seg_d.item(),
        "d_acc": float(((logits_real > 0).float().mean() + (logits_fake < 0).float().mean()) / 2),
        "logit_real": logits_real.mean().item(),
        "logit_fake": logits_fake.mean().item(),
    }
    _check_finite(metrics, state, dump_dir)
    loss_d.backward()
    grad_d = _grad_norm(disc.parameters())
    state.opt_d.step()

    # generator
    disc.requires_grad_(False)
    state.opt_g.zero_grad(set_to_none=True)
    _, adv_g = adversarial_losses(logits_real.detach(), disc(fake_dual))
    seg_g = layout_loss(disc.segment(summary), batch.labels)
    loss_g = total_generator_loss(adv_g, seg_g, t.w_adv, t.w_layout)
    metrics.update({"loss_G": loss_g.item(), "loss_G_adv": adv_g.item(), "loss_layout": seg_g.item()})
    _check_finite(metrics, state, dump_dir)
    loss_g.backward()
    grad_g = _grad_norm(gen.parameters())
    state.opt_g.step()
    disc.requires_grad_(True)

    metrics["grad_norms"] = {"G": grad_g, "D": grad_d}
    state.step += 1
    state.images_seen += t.batch_size
    return metrics


def _trim_metrics(path: Path, step: int) -> None:
    if not path.exists():
        return
    keep = [ln for ln in path.read_text().splitlines() if ln and json.loads(ln)["step"] < step]
    path.write_text("".join(ln + "\n" for ln in keep))


def train(state: TrainState, dataset, out_dir, max_images: int | None = None, log=None,
          on_checkpoint=None) -> list[Path]:
    """Run train_step until the image budget; returns the written checkpoint paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.ini").write_text(dumps_config(state.config))
    metrics_path = out / "metrics.jsonl"
    _trim_metrics(metrics_path, state.step)
    t = state.config.train
    budget = t.total_images if max_images is None else min(t.total_images, max_images)
    written = []
    with open(metrics_path, "a", encoding="utf-8") as fh:
        while state.images_seen < budget:
            batch = make_batch(dataset, state.config, state.step)
            before = state.images_seen
            m = train_step(state, batch, dump_dir=out)
            fh.write(json.dumps(m, sort_keys=True) + "\n")
            fh.flush()
            if log is not None:
                log(m)
            crossed = before // t.checkpoint_every != state.images_seen // t.checkpoint_every
            if crossed or state.images_seen >= budget:
                path = out / f"ckpt_{state.images_seen:08d}.ckpt"
                save_state(state, path)
                written.append(path)
                if on_checkpoint is not None:
                    on_checkpoint(state, path)
    return written
