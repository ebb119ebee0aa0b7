"""Command-line interface: ``oponerf <command> ...``.

Heavy modules are imported inside the command handlers so that
``--threads`` can cap the BLAS pools before numpy loads.
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from pathlib import Path

THREADS_ENV = "OPONERF_THREADS"
_POOL_VARS = ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS")

log = logging.getLogger("oponerf")


class CLIError(Exception):
    pass


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _positive(text: str) -> int:
    n = int(text)
    if n < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return n


def apply_threads(n: int | None) -> None:
    """Cap math-library worker pools (only effective before numpy is imported)."""
    if n is None:
        env = os.environ.get(THREADS_ENV)
        n = int(env) if env else None
    if n is not None:
        for var in _POOL_VARS:
            os.environ[var] = str(n)


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise CLIError(f"missing {what}: {path}")
    return path


# ---------------------------------------------------------------------------
# Data directory helpers
# ---------------------------------------------------------------------------


def load_data_dir(data_dir: Path, cfg):
    from . import io
    from .train import make_train_data

    scene = io.load_scene(_require(data_dir / "scene.json", "scene file"))
    cameras = io.load_rig(_require(data_dir / "rig.json", "rig file"))
    images = [io.read_image(_require(data_dir / "views" / io.view_name(i), "view image")) for i in range(len(cameras))]
    return make_train_data(cfg, scene, cameras, images)


def load_model(path: Path):
    from . import io

    ckpt = io.load_checkpoint(_require(path, "checkpoint"))
    return io.model_from_checkpoint(ckpt), ckpt


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_scene_gen(args) -> int:
    from . import io
    from .camera import RigSpec, arc_rig
    from .scene import generate_scene, render_gt_view

    if not 1 <= args.count <= 16:
        raise CLIError(f"--count must lie in [1, 16], got {args.count}")
    spec = RigSpec(
        n_views=args.views, width=args.resolution, height=args.resolution, radius=args.radius,
        arc_degrees=args.arc, elevation_degrees=args.elevation, fov_degrees=args.fov,
    )
    scene = generate_scene(args.count, args.seed)
    cameras = arc_rig(spec)
    out = Path(args.out)
    (out / "views").mkdir(parents=True, exist_ok=True)
    io.save_scene(out / "scene.json", scene)
    io.save_rig(out / "rig.json", cameras)
    for i, cam in enumerate(cameras):
        io.write_image(out / "views" / io.view_name(i), render_gt_view(scene, cam))
    print(f"wrote scene, rig and {len(cameras)} views to {out}")
    return 0


def _config_from_args(args):
    from .config import Config, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else Config()
    changes = {}
    if getattr(args, "iterations", None) is not None:
        changes["iterations"] = args.iterations
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if changes:
        cfg = cfg.replace(**changes)
        cfg.validate()
    return cfg


def _train_and_save(cfg, data_dir: Path, out: Path) -> int:
    from . import io
    from .config import dump_config
    from .train import LOSS_COLUMNS, TrainingAborted, train

    data = load_data_dir(data_dir, cfg)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(cfg) + "\n")
    try:
        result = train(cfg, data)
    except TrainingAborted as exc:
        io.save_checkpoint(out / "last_good.opo", io.model_checkpoint(exc.model, meta={"aborted": str(exc)}))
        io.write_loss_csv(out / "loss.csv", exc.curve, LOSS_COLUMNS)
        raise CLIError(f"training aborted: {exc}; last good state in {out / 'last_good.opo'}") from exc
    io.save_checkpoint(out / "checkpoint.opo", io.model_checkpoint(result.model, result.rngs, {"iterations": cfg.iterations}))
    io.write_loss_csv(out / "loss.csv", result.curve, LOSS_COLUMNS)
    last = result.curve[-1] if result.curve else None
    print(f"trained {cfg.iterations} iterations; checkpoint {out / 'checkpoint.opo'}" + (f"; final total {last[-1]:.5f}" if last else ""))
    return 0


def cmd_train(args) -> int:
    from .config import dump_config

    cfg = _config_from_args(args)
    if args.print_defaults:
        print(dump_config(cfg))
        return 0
    if not args.data or not args.out:
        raise CLIError("train needs --data and --out (or --print-defaults)")
    return _train_and_save(cfg, Path(args.data), Path(args.out))


def cmd_render(args) -> int:
    from . import io
    from .model import RigContext, render_view

    model, _ = load_model(Path(args.checkpoint))
    data = load_data_dir(Path(args.data), model.cfg)
    ctx = RigContext.build(model, data.support_cameras)
    views = args.views or list(model.cfg.test_views)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in views:
        if not 0 <= v < len(data.cameras):
            raise CLIError(f"view {v} out of range")
        img = render_view(model, data.support_images, ctx, data.cameras[v], data.scene.background)
        io.write_image(out / io.view_name(v, args.format), img)
    print(f"rendered {len(views)} views to {out}")
    return 0


def cmd_eval(args) -> int:
    from . import io
    from .metrics import psnr, ssim
    from .model import RigContext, render_view

    if args.pred and args.gt:
        a = io.read_image(_require(Path(args.pred), "image")).data
        b = io.read_image(_require(Path(args.gt), "image")).data
        print(f"PSNR {psnr(a, b):.4f}  SSIM {ssim(a, b):.6f}")
        return 0
    if not (args.checkpoint and args.data):
        raise CLIError("eval needs --pred/--gt or --checkpoint/--data")
    model, _ = load_model(Path(args.checkpoint))
    data = load_data_dir(Path(args.data), model.cfg)
    ctx = RigContext.build(model, data.support_cameras)
    views = args.views or list(model.cfg.validation_views)
    for v in views:
        img = render_view(model, data.support_images, ctx, data.cameras[v], data.scene.background)
        gt = data.images[v].data
        print(f"view {v:3d}  PSNR {psnr(img.data, gt):.4f}  SSIM {ssim(img.data, gt):.6f}")
    return 0


def cmd_bench(args) -> int:
    from .bench import PROTOCOLS, run_benchmark

    if args.protocol not in PROTOCOLS:
        raise CLIError(f"unknown protocol {args.protocol!r}; choose from {', '.join(PROTOCOLS)}")
    model, _ = load_model(Path(args.checkpoint))
    data = load_data_dir(Path(args.data), model.cfg)
    report = run_benchmark(args.protocol, model, data, model.cfg, seed=args.seed, out_dir=Path(args.out))
    print(report.to_text())
    return 0


def cmd_ablate(args) -> int:
    from .bench import TRIALS, ablation
    from .config import dump_config, load_config

    base = load_config(args.config) if args.config else None
    try:
        cfg = ablation(args.trial, base)
    except ValueError as exc:
        raise CLIError(str(exc)) from exc
    text = dump_config(cfg)
    print(f"# trial {args.trial}: {TRIALS[args.trial][0]}")
    if args.data:
        if not args.out:
            raise CLIError("ablate --data needs --out")
        return _train_and_save(cfg, Path(args.data), Path(args.out))
    if args.out:
        Path(args.out).write_text(text + "\n")
        print(f"wrote {args.out}")
    else:
        print(text)
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import main_report

    ok, report = main_report(tuple(args.seeds))
    print(report)
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oponerf", description="Point-wise personalized radiance fields at desk scale.")
    p.add_argument("--threads", type=_positive, default=None, help=f"cap math-library threads (default: ${THREADS_ENV})")
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("scene-gen", help="generate a scene, a camera rig and ground-truth views")
    s.add_argument("--out", required=True)
    s.add_argument("--count", type=int, default=5)
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--resolution", type=_positive, default=48)
    s.add_argument("--views", type=_positive, default=21)
    s.add_argument("--radius", type=float, default=4.0)
    s.add_argument("--arc", type=float, default=80.0, help="arc span in degrees")
    s.add_argument("--elevation", type=float, default=20.0)
    s.add_argument("--fov", type=float, default=40.0)
    s.set_defaults(func=cmd_scene_gen)

    s = sub.add_parser("train", help="train on frame 0 of a data directory")
    s.add_argument("--data")
    s.add_argument("--out")
    s.add_argument("--config")
    s.add_argument("--iterations", type=int)
    s.add_argument("--seed", type=int)
    s.add_argument("--print-defaults", action="store_true", help="print the effective config and exit")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("render", help="render views with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=_int_list)
    s.add_argument("--format", choices=("png", "ppm"), default="png")
    s.set_defaults(func=cmd_render)

    s = sub.add_parser("eval", help="PSNR / SSIM of two images or of rendered views")
    s.add_argument("--pred")
    s.add_argument("--gt")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.add_argument("--views", type=_int_list)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="run a perturbation benchmark protocol")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--protocol", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("ablate", help="config of an ablation trial (optionally train it)")
    s.add_argument("--trial", type=int, required=True)
    s.add_argument("--config", help="base config (defaults otherwise)")
    s.add_argument("--data", help="train the trial on this data directory")
    s.add_argument("--out", help="config file, or output directory when training")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    s.add_argument("--seeds", type=_int_list, default=[0])
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    apply_threads(args.threads)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CLIError, FileNotFoundError) as exc:
        print(f"oponerf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:  # config and format diagnostics
        print(f"oponerf {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
