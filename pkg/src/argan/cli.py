"""Command-line entry point.

Subcommands cover the full workflow: train a model, sample tuples from a
checkpoint, render a shallow depth-of-field image (directly from a
disparity file or through the trained estimators), evaluate directories of
images and disparity maps, predict disparity for a single image, and build
a synthetic dataset. Every run logs its resolved configuration; failures
exit nonzero with a one-line diagnostic.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

logger = logging.getLogger("argan")

OUTPUT_ROOT_ENV = "ARGAN_OUTPUT_ROOT"


def _resolve_out(path: str | Path) -> Path:
    """Output paths only: a relative path lands under the output root when
    the environment override is set."""
    path = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not path.is_absolute():
        return Path(root) / path
    return path


def _require_files(*paths) -> None:
    for p in paths:
        if p is not None and not Path(p).exists():
            raise FileNotFoundError(f"{p} does not exist")


def _load_image_dir(path, image_size=None):
    from . import fileio

    files = sorted(
        f for f in Path(path).iterdir() if f.suffix.lower() in fileio.IMAGE_EXTENSIONS
    )
    if not files:
        raise ValueError(f"no images found in {path}")
    import torch

    return torch.stack([fileio.load_image(f, image_size) for f in files])


def _load_depth_dir(path):
    from . import fileio

    files = sorted(f for f in Path(path).iterdir() if f.suffix.lower() == ".npy")
    if not files:
        raise ValueError(f"no disparity arrays found in {path}")
    import torch

    return torch.stack([fileio.load_disparity(f)[None] for f in files])


# ---------------------------------------------------------------------------
# handlers


def _cmd_train(args) -> int:
    from .trainer import TrainingConfig, run_training

    _require_files(args.config)
    config = TrainingConfig.from_file(args.config)
    if args.dataset:
        config.dataset = args.dataset
    if args.out:
        config.out_dir = str(_resolve_out(args.out))
    else:
        config.out_dir = str(_resolve_out(config.out_dir))
    if args.seed is not None:
        config.seed = args.seed
    if args.iterations is not None:
        config.total_d_iterations = args.iterations
    _require_files(config.dataset)
    report = run_training(config, resume_from=args.resume)
    print(json.dumps(report, indent=2))
    return 0


def _cmd_generate(args) -> int:
    from . import fileio
    from .apps import synthesize_tuples

    _require_files(args.checkpoint)
    out = _resolve_out(args.out)
    out.mkdir(parents=True, exist_ok=True)
    tuples = synthesize_tuples(args.checkpoint, args.n, seed=args.seed)
    lo = float(tuples["depth"].min())
    hi = float(tuples["depth"].max())
    rows = []
    for i in range(args.n):
        fileio.save_image(tuples["deep"][i], out / f"tuple_{i:04d}_deep.png")
        fileio.save_image(tuples["shallow"][i], out / f"tuple_{i:04d}_shallow.png")
        fileio.save_disparity(tuples["depth"][i], out / f"tuple_{i:04d}_depth.npy")
        rows.append(
            [
                tuples["deep"][i],
                tuples["shallow"][i],
                fileio.colorize_depth(tuples["depth"][i, 0], lo, hi),
            ]
        )
    fileio.save_image_grid(rows, out / "grid.png")
    logger.info("wrote %d tuples and grid.png to %s", args.n, out)
    return 0


def _cmd_render(args) -> int:
    from . import fileio, lfrender

    _require_files(args.image, args.depth, args.unet, args.checkpoint)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    image = fileio.load_image(args.image)[None]

    if args.mode == "direct":
        if args.depth is None:
            raise ValueError("direct rendering needs --depth")
        depth = fileio.load_disparity(args.depth)[None, None]
        if depth.shape[-2:] != image.shape[-2:]:
            raise ValueError(
                f"disparity {tuple(depth.shape[-2:])} does not match image {tuple(image.shape[-2:])}"
            )
        expander = None
        mask = lfrender.build_aperture_mask(args.aperture)
        if args.checkpoint:
            from .trainer import load_generator_bundle

            _, _, expander, mask = load_generator_bundle(args.checkpoint)
        import torch

        with torch.no_grad():
            rendered = lfrender.render(image, depth, args.s, expander, mask)
        fileio.save_image(rendered[0], out)
    else:
        from .apps import load_unet, render_shallow_dof

        if args.unet is None:
            raise ValueError(f"mode {args.mode} needs --unet")
        net = load_unet(args.unet)
        expander = mask = None
        if args.mode == "argan_dr":
            if args.checkpoint is None:
                raise ValueError("mode argan_dr needs --checkpoint for the trained renderer")
            from .trainer import load_generator_bundle

            _, _, expander, mask = load_generator_bundle(args.checkpoint)
        rendered, depth = render_shallow_dof(image, args.mode, net, expander, mask)
        fileio.save_image(rendered[0], out)
        if depth is not None and args.depth_out:
            depth_out = _resolve_out(args.depth_out)
            fileio.save_disparity(depth[0], depth_out)
    logger.info("wrote %s", out)
    return 0


def _cmd_evaluate(args) -> int:
    from . import metrics as M

    _require_files(args.real, args.fake, args.real_depths, args.fake_depths)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)

    real = _load_image_dir(args.real, args.image_size)
    fake = _load_image_dir(args.fake, args.image_size)
    extractor = M.FeatureExtractor(seed=args.feature_seed)
    report = M.MetricReport()

    import torch

    with torch.no_grad():
        result = M.kid(extractor(real), extractor(fake), block_size=args.block_size)
        report.add(
            "kid",
            result.estimate,
            std=result.std,
            count=min(len(real), len(fake)),
            extractor=extractor.identity,
        )
        if real.shape == fake.shape:
            report.add("ssim", M.ssim(real, fake), count=len(real))
            report.add(
                "content_distance",
                M.feature_distance(real, fake, extractor).item(),
                count=len(real),
                extractor=extractor.identity,
            )
    if args.fake_depths:
        depths_fake = _load_depth_dir(args.fake_depths)
        if len(depths_fake) >= 2:
            report.add("dsd", M.dsd(depths_fake), count=len(depths_fake))
        if args.real_depths:
            depths_real = _load_depth_dir(args.real_depths)
            report.add(
                "side", M.side(depths_fake, depths_real), count=len(depths_fake)
            )

    report.save_json(out)
    report.save_csv(out.with_suffix(".csv"))
    from .figures import save_metric_bars

    save_metric_bars(report, out.with_suffix(".png"))
    print(json.dumps(report.to_dict(), indent=2))
    return 0


def _cmd_predict_depth(args) -> int:
    from . import fileio
    from .apps import load_unet

    _require_files(args.image, args.unet)
    out = _resolve_out(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    net = load_unet(args.unet)
    if net.out_channels != 1:
        raise ValueError("checkpoint is not a disparity estimator")
    import torch

    image = fileio.load_image(args.image)[None]
    with torch.no_grad():
        depth = net(image)[0, 0]
    fileio.save_disparity(depth, out)
    fileio.save_image(fileio.colorize_depth(depth), out.with_suffix(".png"))
    logger.info("wrote %s and %s", out, out.with_suffix(".png"))
    return 0


def _cmd_make_synthetic(args) -> int:
    from .synthdata import make_synthetic_dataset, save_synthetic_dataset

    out = _resolve_out(args.out)
    dataset = make_synthetic_dataset(
        args.n, args.size, seed=args.seed, d_min=args.d_min, d_max=args.d_max
    )
    save_synthetic_dataset(dataset, out)
    logger.info("wrote %d scenes to %s", args.n, out)
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="argan",
        description="Unsupervised depth and depth-of-field learning toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training job from a config file")
    p.add_argument("--config", required=True, help="flat JSON training config")
    p.add_argument("--dataset", help="override the dataset folder")
    p.add_argument("--out", help="override the output directory")
    p.add_argument("--seed", type=int, help="override the training seed")
    p.add_argument("--iterations", type=int, help="override total discriminator iterations")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("generate", help="sample tuples from a trained checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_generate)

    p = sub.add_parser("render", help="render a shallow depth-of-field image")
    p.add_argument("--image", required=True)
    p.add_argument("--mode", choices=["direct", "argan_r", "argan_dr"], default="direct")
    p.add_argument("--depth", help="disparity file (NPY or single-channel float image)")
    p.add_argument("--s", type=float, default=1.0, help="defocus strength in [0, 1]")
    p.add_argument("--aperture", type=int, default=5, help="views per axis for direct mode")
    p.add_argument("--unet", help="u-net checkpoint for argan_r / argan_dr")
    p.add_argument("--checkpoint", help="training checkpoint (trained expansion network)")
    p.add_argument("--depth-out", dest="depth_out", help="where to save the estimated disparity")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_render)

    p = sub.add_parser("evaluate", help="compute metrics between image directories")
    p.add_argument("--real", required=True, help="directory of reference images")
    p.add_argument("--fake", required=True, help="directory of generated images")
    p.add_argument("--real-depths", dest="real_depths", help="directory of reference NPY disparities")
    p.add_argument("--fake-depths", dest="fake_depths", help="directory of generated NPY disparities")
    p.add_argument("--image-size", dest="image_size", type=int, default=None)
    p.add_argument("--feature-seed", dest="feature_seed", type=int, default=0)
    p.add_argument("--block-size", dest="block_size", type=int, default=1000)
    p.add_argument("--out", required=True, help="report path (.json)")
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("predict-depth", help="estimate disparity for a single image")
    p.add_argument("--image", required=True)
    p.add_argument("--unet", required=True, help="disparity-estimator u-net checkpoint")
    p.add_argument("--out", required=True, help="output NPY path (a PNG is written next to it)")
    p.set_defaults(func=_cmd_predict_depth)

    p = sub.add_parser("make-synthetic", help="generate a synthetic dataset")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--d-min", dest="d_min", type=float, default=1.0)
    p.add_argument("--d-max", dest="d_max", type=float, default=3.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_make_synthetic)

    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    logger.info("resolved arguments: %s", {k: v for k, v in vars(args).items() if k != "func"})
    try:
        return args.func(args)
    except Exception as exc:  # surface a one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
