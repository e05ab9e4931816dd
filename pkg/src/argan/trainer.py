"""Adversarial training orchestration.

One training step runs a single discriminator update on a real batch plus a
freshly rendered fake batch (both passed through the same augmentation
draw), followed by a configurable number of generator updates with fresh
latent and defocus-strength draws. The generator objective combines the
non-saturating adversarial term, the center focus prior during warm-up, the
stack-consistency penalty of the renderer, and any configured alternative
consistency term. Averaged generator weights are refreshed after every
generator update, and checkpoints capture models, optimizers, and all RNG
streams so a resumed run replays bit-exactly.
"""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import torch
from torch import Tensor

from .lfrender import (
    ApertureMask,
    DepthExpansion,
    build_aperture_mask,
    depth_consistency_loss,
    render,
)
from .metrics import FeatureExtractor, MetricReport, ad, dsd, feature_distance, kid
from .models import Discriminator, Generator, ema_update, sample_latent
from .objectives import (
    ABLATION_MODES,
    CenterFocusPriorConfig,
    DoFScalePolicy,
    center_focus_prior,
    discriminator_loss,
    generator_loss,
    l1_image_consistency,
    perceptual_image_consistency,
    prior_loss,
    sample_dof_scale,
)

logger = logging.getLogger(__name__)

__all__ = [
    "TrainingConfig",
    "AugmentParams",
    "draw_augment_params",
    "apply_augment",
    "diff_augment",
    "TrainState",
    "build_state",
    "train_step",
    "save_checkpoint",
    "load_checkpoint",
    "run_training",
    "evaluate_snapshot",
]


@dataclass
class TrainingConfig:
    """Declarative description of one training run (flat key-value file)."""

    dataset: str = ""
    out_dir: str = "runs/argan"
    image_size: int = 64
    batch_size: int = 32
    total_d_iterations: int = 1000
    g_updates_per_d: int = 2
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    ema_decay: float = 0.999
    policy: str = "binomial"
    p_s: float = 0.5
    prior_r_th: float = 0.25
    prior_gain: float = 1.0
    prior_weight: float = 1.0
    prior_warmup_iters: int = 0
    lambda_depth_consistency: float = 1.0
    ablation: str = "none"
    l1_weight: float = 1.0
    aug_color: bool = True
    aug_translation: bool = True
    aug_cutout: bool = True
    aperture_size: int = 5
    latent_dim: int = 128
    scale_mlp_hidden: int = 128
    width_mult: float = 1.0
    seed: int = 0
    checkpoint_every: int = 1000
    sample_every: int = 1000
    log_every: int = 50
    n_sample_grid: int = 8
    n_eval_samples: int = 128
    eval_feature_seed: int = 0

    def validate(self) -> None:
        if self.image_size not in (32, 64, 128):
            raise ValueError(f"image_size must be 32, 64, or 128, got {self.image_size}")
        if self.batch_size < 2:
            raise ValueError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.lr <= 0 or self.ema_decay < 0 or self.ema_decay > 1:
            raise ValueError("learning rate must be positive and ema_decay in [0, 1]")
        if self.total_d_iterations < 0 or self.g_updates_per_d < 1:
            raise ValueError("iteration counts must be non-negative (g updates >= 1)")
        if self.ablation not in ABLATION_MODES:
            raise ValueError(f"unknown ablation mode {self.ablation!r}")
        self.policy_obj()  # validates kind and p_s
        self.prior_cfg()

    def policy_obj(self) -> DoFScalePolicy:
        return DoFScalePolicy(kind=self.policy, p_s=self.p_s)

    def prior_cfg(self) -> CenterFocusPriorConfig:
        return CenterFocusPriorConfig(
            r_th=self.prior_r_th,
            gain=self.prior_gain,
            weight=self.prior_weight,
            warmup_iters=self.prior_warmup_iters,
        )

    def to_file(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2, sort_keys=True) + "\n")

    @classmethod
    def from_file(cls, path) -> "TrainingConfig":
        data = json.loads(Path(path).read_text())
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        config = cls(**data)
        config.validate()
        return config


# ---------------------------------------------------------------------------
# differentiable augmentation


@dataclass
class AugmentParams:
    """One frozen draw of augmentation parameters for a batch."""

    brightness: Tensor | None = None  # (B, 1, 1, 1)
    saturation: Tensor | None = None
    contrast: Tensor | None = None
    translation: Tensor | None = None  # (B, 2) integer shifts (dy, dx)
    cutout: Tensor | None = None  # (B, 2) integer square centers (cy, cx)


def draw_augment_params(
    n: int,
    size: int,
    color: bool = True,
    translation: bool = True,
    cutout: bool = True,
    generator: torch.Generator | None = None,
) -> AugmentParams:
    params = AugmentParams()
    if color:
        params.brightness = torch.rand(n, 1, 1, 1, generator=generator)
        params.saturation = torch.rand(n, 1, 1, 1, generator=generator)
        params.contrast = torch.rand(n, 1, 1, 1, generator=generator)
    if translation:
        shift = math.ceil(size / 8)
        params.translation = torch.randint(-shift, shift + 1, (n, 2), generator=generator)
    if cutout:
        params.cutout = torch.randint(0, size, (n, 2), generator=generator)
    return params


def apply_augment(images: Tensor, params: AugmentParams) -> Tensor:
    """Apply a frozen augmentation draw; differentiable in the pixel values."""
    x = images
    n, _, height, width = x.shape
    if params.brightness is not None:
        x = x + (params.brightness - 0.5)
    if params.saturation is not None:
        mean = x.mean(dim=1, keepdim=True)
        x = (x - mean) * (params.saturation * 2) + mean
    if params.contrast is not None:
        mean = x.mean(dim=(1, 2, 3), keepdim=True)
        x = (x - mean) * (params.contrast + 0.5) + mean
    if params.translation is not None:
        batch_idx = torch.arange(n).view(n, 1, 1)
        grid_y = torch.arange(height).view(1, height, 1) + params.translation[:, 0].view(n, 1, 1)
        grid_x = torch.arange(width).view(1, 1, width) + params.translation[:, 1].view(n, 1, 1)
        grid_y = grid_y.clamp(0, height - 1).expand(n, height, width)
        grid_x = grid_x.clamp(0, width - 1).expand(n, height, width)
        x = x.permute(0, 2, 3, 1)[batch_idx, grid_y, grid_x].permute(0, 3, 1, 2)
    if params.cutout is not None:
        half = height // 4  # square of side H/2 around the drawn center
        span = torch.arange(-half, height // 2 - half)
        cy = (params.cutout[:, 0].view(n, 1) + span.view(1, -1)).clamp(0, height - 1)
        cx = (params.cutout[:, 1].view(n, 1) + span.view(1, -1)).clamp(0, width - 1)
        mask = torch.ones(n, height, width, dtype=x.dtype, device=x.device)
        batch_idx = torch.arange(n).view(n, 1, 1)
        mask[batch_idx, cy.unsqueeze(2), cx.unsqueeze(1)] = 0
        x = x * mask.unsqueeze(1)
    return x


def diff_augment(
    images: Tensor,
    color: bool = True,
    translation: bool = True,
    cutout: bool = True,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Draw one set of augmentation parameters and apply it."""
    params = draw_augment_params(
        images.shape[0], images.shape[-1], color, translation, cutout, generator
    )
    return apply_augment(images, params)


# ---------------------------------------------------------------------------
# training state


@dataclass
class TrainState:
    config: TrainingConfig
    generator: Generator
    generator_ema: Generator
    expander: DepthExpansion
    expander_ema: DepthExpansion
    discriminator: Discriminator
    discriminator_b: Discriminator | None
    mask: ApertureMask
    prior_map: Tensor
    opt_g: torch.optim.Adam
    opt_d: torch.optim.Adam
    sample_rng: torch.Generator
    data_rng: torch.Generator
    data: Tensor
    grid_latents: Tensor
    perceptual_extractor: FeatureExtractor | None = None
    iteration: int = 0


def _load_dataset(config: TrainingConfig) -> Tensor:
    from .synthdata import ingest_folder

    path = Path(config.dataset)
    if (path / "images").is_dir():
        path = path / "images"
    return ingest_folder(path, config.image_size)


def _frozen_copy(module):
    clone = copy.deepcopy(module)
    clone.requires_grad_(False)
    return clone


def build_state(config: TrainingConfig, data: Tensor | None = None) -> TrainState:
    config.validate()
    if data is None:
        data = _load_dataset(config)
    torch.manual_seed(config.seed)
    generator = Generator(
        image_size=config.image_size,
        latent_dim=config.latent_dim,
        width_mult=config.width_mult,
        scale_hidden=config.scale_mlp_hidden,
    )
    expander = DepthExpansion(config.aperture_size**2)
    discriminator = Discriminator(config.image_size, width_mult=config.width_mult)
    discriminator_b = (
        Discriminator(config.image_size, width_mult=config.width_mult)
        if config.ablation == "double_disc"
        else None
    )
    opt_g = torch.optim.Adam(
        list(generator.parameters()) + list(expander.parameters()),
        lr=config.lr,
        betas=(config.beta1, config.beta2),
    )
    d_params = list(discriminator.parameters())
    if discriminator_b is not None:
        d_params += list(discriminator_b.parameters())
    opt_d = torch.optim.Adam(d_params, lr=config.lr, betas=(config.beta1, config.beta2))
    prior_map = center_focus_prior(config.image_size, config.image_size, config.prior_cfg())
    extractor = (
        FeatureExtractor(seed=config.eval_feature_seed) if config.ablation == "perceptual" else None
    )
    return TrainState(
        config=config,
        generator=generator,
        generator_ema=_frozen_copy(generator),
        expander=expander,
        expander_ema=_frozen_copy(expander),
        discriminator=discriminator,
        discriminator_b=discriminator_b,
        mask=build_aperture_mask(config.aperture_size),
        prior_map=prior_map,
        opt_g=opt_g,
        opt_d=opt_d,
        sample_rng=torch.Generator().manual_seed(config.seed + 1),
        data_rng=torch.Generator().manual_seed(config.seed + 2),
        data=data,
        grid_latents=sample_latent(config.n_sample_grid, config.latent_dim, seed=config.seed + 777),
    )


def _abort_non_finite(state: TrainState, stage: str, value: Tensor) -> None:
    out = Path(state.config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    snapshot = out / f"diagnostic_nonfinite_iter{state.iteration:07d}.pt"
    save_checkpoint(state, snapshot)
    raise RuntimeError(
        f"non-finite {stage} loss ({value.item()}) at iteration {state.iteration}; "
        f"diagnostic snapshot written to {snapshot}"
    )


def _render_fakes(state: TrainState, z: Tensor):
    """Generate a fake batch for the configured training mode.

    Returns (adversarial batch, deep branch, depth, refined stack, raw
    stack). The mixture mode draws one strength per sample; the alternative
    modes always render at full strength.
    """
    cfg = state.config
    deep, depth = state.generator(z)
    if cfg.ablation == "none":
        s = sample_dof_scale(cfg.policy_obj(), z.shape[0], generator=state.sample_rng)
    else:
        s = torch.ones(z.shape[0])
    rendered, expanded, warped = render(
        deep, depth, s, state.expander, state.mask, return_parts=True
    )
    return rendered, deep, depth, expanded, warped


def train_step(state: TrainState) -> dict[str, float]:
    """One discriminator update followed by the configured generator updates."""
    cfg = state.config
    batch = cfg.batch_size
    toggles = dict(color=cfg.aug_color, translation=cfg.aug_translation, cutout=cfg.aug_cutout)

    idx = torch.randint(0, state.data.shape[0], (batch,), generator=state.data_rng)
    real = state.data[idx]

    # discriminator update; real and fake share one augmentation draw
    z = sample_latent(batch, cfg.latent_dim, generator=state.sample_rng)
    with torch.no_grad():
        rendered, deep, _, _, _ = _render_fakes(state, z)
    params = draw_augment_params(batch, cfg.image_size, generator=state.sample_rng, **toggles)
    d_loss = discriminator_loss(
        state.discriminator(apply_augment(real, params)),
        state.discriminator(apply_augment(rendered, params)),
    )
    if state.discriminator_b is not None:
        d_loss = d_loss + discriminator_loss(
            state.discriminator_b(apply_augment(real, params)),
            state.discriminator_b(apply_augment(deep, params)),
        )
    if not torch.isfinite(d_loss):
        _abort_non_finite(state, "discriminator", d_loss)
    state.opt_d.zero_grad(set_to_none=True)
    d_loss.backward()
    state.opt_d.step()

    log: dict[str, float] = {"iteration": state.iteration, "d_loss": d_loss.item()}
    for _ in range(cfg.g_updates_per_d):
        z = sample_latent(batch, cfg.latent_dim, generator=state.sample_rng)
        rendered, deep, depth, expanded, warped = _render_fakes(state, z)
        params = draw_augment_params(batch, cfg.image_size, generator=state.sample_rng, **toggles)
        adv = generator_loss(state.discriminator(apply_augment(rendered, params)))
        if state.discriminator_b is not None:
            adv = adv + generator_loss(state.discriminator_b(apply_augment(deep, params)))
        prior = prior_loss(
            depth, state.prior_map, cfg.prior_weight, state.iteration, cfg.prior_warmup_iters
        )
        depth_reg = depth_consistency_loss(expanded, warped, cfg.lambda_depth_consistency)
        extra = torch.zeros(())
        if cfg.ablation == "l1":
            extra = l1_image_consistency(deep, rendered, cfg.l1_weight)
        elif cfg.ablation == "perceptual":
            extra = perceptual_image_consistency(deep, rendered, _default_extractor(state))
        g_total = adv + prior + depth_reg + extra
        if not torch.isfinite(g_total):
            _abort_non_finite(state, "generator", g_total)
        state.opt_g.zero_grad(set_to_none=True)
        g_total.backward()
        state.opt_g.step()
        ema_update(state.generator_ema, state.generator, cfg.ema_decay)
        ema_update(state.expander_ema, state.expander, cfg.ema_decay)
        log.update(
            g_adv=adv.item(),
            g_prior=prior.item(),
            g_depth_reg=depth_reg.item(),
            g_extra=extra.item(),
            g_total=g_total.item(),
        )
    state.iteration += 1
    return log


def _default_extractor(state: TrainState) -> FeatureExtractor:
    if state.perceptual_extractor is None:
        state.perceptual_extractor = FeatureExtractor(seed=state.config.eval_feature_seed)
    return state.perceptual_extractor


# ---------------------------------------------------------------------------
# checkpointing

CHECKPOINT_VERSION = 1


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": CHECKPOINT_VERSION,
        "config": asdict(state.config),
        "iteration": state.iteration,
        "models": {
            "generator": state.generator.state_dict(),
            "generator_ema": state.generator_ema.state_dict(),
            "expander": state.expander.state_dict(),
            "expander_ema": state.expander_ema.state_dict(),
            "discriminator": state.discriminator.state_dict(),
        },
        "optimizers": {"g": state.opt_g.state_dict(), "d": state.opt_d.state_dict()},
        "rng": {"sample": state.sample_rng.get_state(), "data": state.data_rng.get_state()},
    }
    if state.discriminator_b is not None:
        payload["models"]["discriminator_b"] = state.discriminator_b.state_dict()
    torch.save(payload, path)
    return path


def load_checkpoint(path, config: TrainingConfig | None = None, data: Tensor | None = None) -> TrainState:
    """Rebuild a training state from an archive; the run continues exactly
    where it stopped (models, optimizers, and RNG streams restored)."""
    payload = torch.load(path, weights_only=False)
    if config is None:
        config = TrainingConfig(**payload["config"])
    state = build_state(config, data=data)
    state.generator.load_state_dict(payload["models"]["generator"])
    state.generator_ema.load_state_dict(payload["models"]["generator_ema"])
    state.expander.load_state_dict(payload["models"]["expander"])
    state.expander_ema.load_state_dict(payload["models"]["expander_ema"])
    state.discriminator.load_state_dict(payload["models"]["discriminator"])
    if state.discriminator_b is not None:
        state.discriminator_b.load_state_dict(payload["models"]["discriminator_b"])
    state.opt_g.load_state_dict(payload["optimizers"]["g"])
    state.opt_d.load_state_dict(payload["optimizers"]["d"])
    state.sample_rng.set_state(payload["rng"]["sample"])
    state.data_rng.set_state(payload["rng"]["data"])
    state.iteration = payload["iteration"]
    return state


def load_generator_bundle(path):
    """Load the averaged generator, expansion network, mask, and config from
    a checkpoint (the pieces needed for sampling and rendering)."""
    payload = torch.load(path, weights_only=False)
    config = TrainingConfig(**payload["config"])
    generator = Generator(
        image_size=config.image_size,
        latent_dim=config.latent_dim,
        width_mult=config.width_mult,
        scale_hidden=config.scale_mlp_hidden,
    )
    generator.load_state_dict(payload["models"]["generator_ema"])
    generator.requires_grad_(False)
    expander = DepthExpansion(config.aperture_size**2)
    expander.load_state_dict(payload["models"]["expander_ema"])
    expander.requires_grad_(False)
    return config, generator, expander, build_aperture_mask(config.aperture_size)


# ---------------------------------------------------------------------------
# full runs

_CSV_FIELDS = [
    "iteration",
    "d_loss",
    "g_adv",
    "g_prior",
    "g_depth_reg",
    "g_extra",
    "g_total",
    "wall_time",
]


def _append_metrics_row(path: Path, row: dict) -> None:
    new = not path.exists()
    with open(path, "a", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=_CSV_FIELDS)
        if new:
            writer.writeheader()
        writer.writerow({k: row.get(k, "") for k in _CSV_FIELDS})


def emit_samples(state: TrainState, path) -> None:
    """Write a grid of (deep image | rendered image | disparity) triplets
    from the averaged generator at full strength."""
    from .fileio import colorize_depth, save_image_grid

    with torch.no_grad():
        deep, depth = state.generator_ema(state.grid_latents)
        shallow = render(deep, depth, 1.0, state.expander_ema, state.mask)
    lo = float(depth.min())
    hi = float(depth.max())
    rows = [
        [deep[i], shallow[i], colorize_depth(depth[i, 0], lo, hi)]
        for i in range(deep.shape[0])
    ]
    save_image_grid(rows, path)


def evaluate_snapshot(state: TrainState, n_samples: int | None = None):
    """Distribution and depth metrics of the averaged generator against the
    training images. Returns (report, average-depth map)."""
    cfg = state.config
    n = min(n_samples or cfg.n_eval_samples, state.data.shape[0])
    gen = torch.Generator().manual_seed(cfg.seed + 9999)
    z = sample_latent(n, cfg.latent_dim, generator=gen)
    with torch.no_grad():
        deep, depth = state.generator_ema(z)
        shallow = render(deep, depth, 1.0, state.expander_ema, state.mask)
        extractor = FeatureExtractor(seed=cfg.eval_feature_seed)
        feats_real = extractor(state.data[:n])
        feats_deep = extractor(deep)
        feats_shallow = extractor(shallow)
        content = feature_distance(deep, shallow, extractor).item()
    block = min(1000, n)
    report = MetricReport()
    for name, feats in (("kid_deep", feats_deep), ("kid_shallow", feats_shallow)):
        result = kid(feats_real, feats, block_size=block)
        report.add(name, result.estimate, std=result.std, count=n, extractor=extractor.identity)
    report.add("content_distance", content, count=n, extractor=extractor.identity)
    report.add("dsd", dsd(depth), count=n)
    return report, ad(depth)


def run_training(config: TrainingConfig, resume_from=None) -> dict:
    """Execute a full training run and write checkpoints, sample grids, a
    line-delimited metrics log, figures, and a summary report."""
    config.validate()
    out = Path(config.out_dir)
    ckpt_dir = out / "checkpoints"
    samples_dir = out / "samples"
    figures_dir = out / "figures"
    for d in (ckpt_dir, samples_dir, figures_dir):
        d.mkdir(parents=True, exist_ok=True)
    config.to_file(out / "resolved_config.json")
    logger.info("training config: %s", json.dumps(asdict(config), sort_keys=True))

    data = _load_dataset(config)
    if resume_from is not None:
        state = load_checkpoint(resume_from, config=config, data=data)
        logger.info("resumed from %s at iteration %d", resume_from, state.iteration)
    else:
        state = build_state(config, data=data)
        save_checkpoint(state, ckpt_dir / f"ckpt_{state.iteration:07d}.pt")

    csv_path = out / "metrics.csv"
    start = time.perf_counter()
    while state.iteration < config.total_d_iterations:
        row = train_step(state)
        it = row["iteration"]
        last = state.iteration >= config.total_d_iterations
        if it % config.log_every == 0 or last:
            row["wall_time"] = round(time.perf_counter() - start, 3)
            _append_metrics_row(csv_path, row)
        if config.sample_every and (state.iteration % config.sample_every == 0 or last):
            emit_samples(state, samples_dir / f"samples_{state.iteration:07d}.png")
        if config.checkpoint_every and state.iteration % config.checkpoint_every == 0:
            save_checkpoint(state, ckpt_dir / f"ckpt_{state.iteration:07d}.pt")

    final_ckpt = save_checkpoint(state, ckpt_dir / "ckpt_final.pt")
    emit_samples(state, samples_dir / "samples_final.png")

    report_data: dict = {
        "iterations": state.iteration,
        "final_checkpoint": str(final_ckpt),
        "metrics_csv": str(csv_path) if csv_path.exists() else None,
        "figures": [],
    }
    if state.data.shape[0] >= 2:
        metric_report, ad_map = evaluate_snapshot(state)
        metric_report.save_json(out / "final_metrics.json")
        metric_report.save_csv(out / "final_metrics.csv")
        report_data["metrics"] = metric_report.to_dict()
        from .fileio import colorize_depth, save_image

        ad_path = figures_dir / "average_depth.png"
        save_image(colorize_depth(ad_map), ad_path)
        report_data["figures"].append(str(ad_path))
    if csv_path.exists():
        from .figures import save_loss_curves

        loss_path = figures_dir / "losses.png"
        save_loss_curves(csv_path, loss_path)
        report_data["figures"].append(str(loss_path))

    (out / "report.json").write_text(json.dumps(report_data, indent=2) + "\n")
    logger.info("training finished at iteration %d; report in %s", state.iteration, out)
    return report_data
