"""Perturbation benchmarks (train on frame 0, test on changed frames) and ablations."""

from __future__ import annotations

import copy
import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import io
from .camera import Camera
from .config import Config
from .metrics import psnr, ssim
from .model import OPONeRF, RigContext, encode, render_view
from .scene import Image, Perturbation, Scene, add_noise, generate_scene, perturb, render_gt_view
from .train import TrainData, make_train_data, train

PROTOCOLS = ("move", "light", "existence", "noise")
EXISTENCE_COUNTS = (5, 6, 7)
N_STEPS = 10
MOVE_DISTANCE = 0.3
LIGHT_SPREAD = 0.4  # factors drawn from [1 - spread, 1 + spread]

# Table of single-switch ablations keyed by trial id.
TRIALS = {
    1: ("without adaptiveness factor (A = 0, candidate weights only)", {"adaptive_mode": "zeros"}),
    2: ("without probabilistic modeling (F = f, no L_appr / L_rec)", {"probabilistic": False}),
    5: ("all ones for A (personal codes only)", {"adaptive_mode": "ones"}),
    6: ("all zeros for the PCD mask", {"mask_mode": "zeros"}),
    7: ("without quantization in the PCD mask (sigmoid)", {"mask_mode": "sigmoid"}),
    8: ("without diversity loss", {"diversity_weight": 0.0}),
    9: ("without residual connection in F", {"residual": False}),
    10: ("without the invariant term in F", {"use_invariance": False}),
}


def ablation(trial_id: int, base: Config | None = None) -> Config:
    """Default (or ``base``) config with exactly the switch of ``trial_id`` flipped."""
    if trial_id not in TRIALS:
        raise ValueError(f"unknown ablation trial {trial_id}; choose from {sorted(TRIALS)}")
    cfg = (base or Config()).replace(**TRIALS[trial_id][1])
    cfg.validate()
    return cfg


@dataclass
class BenchRow:
    step: int
    label: str
    psnr: float
    ssim: float
    degradation: float  # percent PSNR loss against the reference


@dataclass
class BenchmarkReport:
    protocol: str
    reference_psnr: float
    reference_ssim: float
    rows: list[BenchRow]
    config_digest: str
    seed: int
    views: list[int]
    images: list[str] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows]))

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows]))

    def row(self, label: str) -> BenchRow:
        for r in self.rows:
            if r.label == label:
                return r
        raise KeyError(label)

    def to_text(self) -> str:
        lines = [
            f"protocol {self.protocol}  seed {self.seed}  views {self.views}  config {self.config_digest[:12]}",
            f"reference  PSNR {self.reference_psnr:7.3f}  SSIM {self.reference_ssim:.4f}",
            f"{'step':>4}  {'label':<22} {'PSNR':>8} {'SSIM':>7} {'degr %':>8}",
        ]
        for r in self.rows:
            lines.append(f"{r.step:>4}  {r.label:<22} {r.psnr:8.3f} {r.ssim:7.4f} {r.degradation:8.3f}")
        lines.append(f"mean  PSNR {self.mean_psnr:7.3f}  SSIM {self.mean_ssim:.4f}")
        return "\n".join(lines)

    def write(self, out_dir) -> tuple[Path, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        csv_path = out / f"{self.protocol}_report.csv"
        with csv_path.open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["protocol", "step", "label", "psnr", "ssim", "degradation_pct", "config_digest", "seed"])
            w.writerow([self.protocol, -1, "reference", repr(self.reference_psnr), repr(self.reference_ssim), 0.0, self.config_digest, self.seed])
            for r in self.rows:
                w.writerow([self.protocol, r.step, r.label, repr(r.psnr), repr(r.ssim), repr(r.degradation), self.config_digest, self.seed])
        txt_path = out / f"{self.protocol}_report.txt"
        txt_path.write_text(self.to_text() + "\n")
        return csv_path, txt_path


def degradation(reference: float, value: float) -> float:
    return (reference - value) / reference * 100.0


class GTCache:
    """Memoized ground-truth renders keyed by scene content and view index."""

    def __init__(self, cameras: list[Camera]):
        self.cameras = cameras
        self._store: dict[tuple[str, int], Image] = {}

    def get(self, scene: Scene, view: int) -> Image:
        key = (json.dumps(io.scene_to_dict(scene), sort_keys=True), view)
        if key not in self._store:
            self._store[key] = render_gt_view(scene, self.cameras[view])
        return self._store[key]


@dataclass
class Evaluator:
    """Renders test views of (possibly perturbed) frames with a trained model."""

    model: OPONeRF
    ctx: RigContext
    cameras: list[Camera]
    support: list[int]
    gt: GTCache

    def evaluate(self, scene: Scene, views, image_noise: float = 0.0, feature_noise: float = 0.0, noise_seed=0,
                 prefix: str | None = None, out_dir=None, images: list | None = None) -> tuple[float, float]:
        support_imgs = [self.gt.get(scene, i) for i in self.support]
        if image_noise > 0:
            ss = np.random.SeedSequence([int(noise_seed), 1])
            support_imgs = [add_noise(im, image_noise, np.random.default_rng(s)) for im, s in zip(support_imgs, ss.spawn(len(support_imgs)))]
        noise_rng = np.random.default_rng(np.random.SeedSequence([int(noise_seed), 2]))
        vols = encode(self.model, support_imgs, self.ctx, feature_noise, noise_rng)
        ps, ss_ = [], []
        for v in views:
            pred = render_view(self.model, support_imgs, self.ctx, self.cameras[v], scene.background, vols=vols)
            target = self.gt.get(scene, v)
            ps.append(psnr(pred.data, target.data))
            ss_.append(ssim(pred.data, target.data))
            if out_dir is not None and prefix is not None:
                base = Path(out_dir)
                base.mkdir(parents=True, exist_ok=True)
                images.append(str(io.write_image(base / f"{prefix}_view{v:03d}.png", pred)))
                io.write_image(base / f"{prefix}_view{v:03d}_gt.png", target)
        return float(np.mean(ps)), float(np.mean(ss_))


def move_sequence(scene: Scene, seed: int, magnitude: float = 1.0, steps: int = N_STEPS) -> list[Perturbation]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 11]))
    seq = []
    for k in range(steps):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        shift = MOVE_DISTANCE * magnitude * np.array([np.cos(angle), 0.0, np.sin(angle)])
        seq.append(Perturbation("move-object", object_index=k % len(scene.objects), translation=tuple(shift)))
    return seq


def light_sequence(seed: int, magnitude: float = 1.0, steps: int = N_STEPS) -> list[Perturbation]:
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 12]))
    factors = 1.0 + magnitude * rng.uniform(-LIGHT_SPREAD, LIGHT_SPREAD, size=steps)
    return [Perturbation("scale-light", light_factor=float(f)) for f in factors]


def _evaluator(model: OPONeRF, data: TrainData, ctx: RigContext | None, gt: GTCache | None) -> Evaluator:
    ctx = ctx or RigContext.build(model, data.support_cameras)
    return Evaluator(model, ctx, data.cameras, data.support, gt or GTCache(data.cameras))


def run_benchmark(
    protocol: str,
    model: OPONeRF | None,
    data: TrainData,
    cfg: Config | None = None,
    seed: int = 0,
    magnitude: float = 1.0,
    out_dir=None,
    ctx: RigContext | None = None,
    gt: GTCache | None = None,
    noise_sigmas: dict[str, float] | None = None,
    existence_models: dict[int, OPONeRF] | None = None,
) -> BenchmarkReport:
    """Evaluate a model trained on ``data`` (frame 0) on a perturbation protocol.

    ``move`` and ``light`` produce ten perturbed frames, ``existence`` the
    3x3 train/test object-count grid (training the missing models), and
    ``noise`` image noise on the support views and Gaussian noise on the
    feature volume.  Degradation is relative to the unperturbed frame on the
    same views.
    """
    if protocol not in PROTOCOLS:
        raise ValueError(f"unknown protocol {protocol!r}; choose from {PROTOCOLS}")
    cfg = cfg or (model.cfg if model is not None else Config())
    if protocol != "existence" and model is None:
        raise ValueError("a trained model (checkpoint) is required")
    if protocol == "existence":
        return _run_existence(cfg, data, seed, out_dir, existence_models, gt)
    ev = _evaluator(model, data, ctx, gt)
    views = list(cfg.validation_views) if protocol == "noise" else list(cfg.test_views)
    img_dir = None if out_dir is None else Path(out_dir) / protocol
    images: list[str] = []
    ref_p, ref_s = ev.evaluate(data.scene, views, prefix="reference", out_dir=img_dir, images=images)
    rows = []
    if protocol in ("move", "light"):
        seq = move_sequence(data.scene, seed, magnitude) if protocol == "move" else light_sequence(seed, magnitude)
        for k, p in enumerate(seq):
            scene = perturb(data.scene, p)
            pv, sv = ev.evaluate(scene, views, prefix=f"step{k:02d}", out_dir=img_dir, images=images)
            label = f"object{p.object_index}" if protocol == "move" else f"light x{p.light_factor:.3f}"
            rows.append(BenchRow(k, label, pv, sv, degradation(ref_p, pv)))
    else:
        sig = noise_sigmas or {
            "image": cfg.image_noise_sigma,
            "image-8bit-scale": 1.5 / 255.0,
            "feature": cfg.feature_noise_sigma,
        }
        for k, (label, sigma) in enumerate(sig.items()):
            kind = "feature" if label.startswith("feature") else "image"
            pv, sv = ev.evaluate(
                data.scene, views, image_noise=sigma if kind == "image" else 0.0,
                feature_noise=sigma if kind == "feature" else 0.0, noise_seed=seed + k,
                prefix=f"step{k:02d}", out_dir=img_dir, images=images,
            )
            rows.append(BenchRow(k, f"{label} s={sigma:.4g}", pv, sv, degradation(ref_p, pv)))
    report = BenchmarkReport(protocol, ref_p, ref_s, rows, cfg.digest(), seed, views, images)
    if out_dir is not None:
        report.write(out_dir)
    return report


def existence_scenes(cfg: Config, counts=EXISTENCE_COUNTS) -> dict[int, Scene]:
    """Nested scenes: the n-object frame keeps the first n objects of the largest one."""
    full = generate_scene(max(counts), cfg.scene_seed)
    out = {}
    for n in counts:
        s = copy.deepcopy(full)
        s.objects = s.objects[:n]
        out[n] = s
    return out


def _run_existence(cfg, data, seed, out_dir, models, gt) -> BenchmarkReport:
    scenes = existence_scenes(cfg)
    gt = gt or GTCache(data.cameras)
    models = dict(models or {})
    img_dir = None if out_dir is None else Path(out_dir) / "existence"
    images: list[str] = []
    rows = []
    diag = []
    k = 0
    for n_train in EXISTENCE_COUNTS:
        tdata = make_train_data(cfg, scenes[n_train], data.cameras, [gt.get(scenes[n_train], i) for i in range(len(data.cameras))])
        if n_train not in models:
            models[n_train] = train(cfg, tdata).model
        ev = _evaluator(models[n_train], tdata, None, gt)
        for n_test in EXISTENCE_COUNTS:
            pv, sv = ev.evaluate(scenes[n_test], cfg.test_views, prefix=f"train{n_train}_test{n_test}", out_dir=img_dir, images=images)
            rows.append(BenchRow(k, f"train{n_train}-test{n_test}", pv, sv, 0.0))
            if n_train == n_test:
                diag.append((n_train, pv, sv))
            k += 1
    ref = {n: (p, s) for n, p, s in diag}
    for r in rows:
        n_train = int(r.label.split("-")[0][5:])
        r.degradation = degradation(ref[n_train][0], r.psnr)
    ref_p = float(np.mean([p for _, p, _ in diag]))
    ref_s = float(np.mean([s for _, _, s in diag]))
    report = BenchmarkReport("existence", ref_p, ref_s, rows, cfg.digest(), seed, list(cfg.test_views), images)
    if out_dir is not None:
        report.write(out_dir)
    return report
