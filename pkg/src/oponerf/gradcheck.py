"""Finite-difference suite over every differentiable op and a tiny end-to-end model."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .config import Config
from .encoder import masked_variance
from .renderer import personalized_linear, volume_render
from .tensor import Tape, Tensor, concat, finite_difference_check, long_tailed_slope, sparse_matmul, step_quantize

TOLERANCE = 1e-4
PROBES = (0.0, 0.2, -0.2, 0.4, -0.4, 0.7, -0.7, 1.0, -1.0, 1.5, -1.5)


@dataclass
class CheckResult:
    name: str
    error: float
    passed: bool


def _project(rng, shape):
    # fixed random read-out so every output coordinate contributes
    return rng.uniform(0.5, 1.5, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def multi_input_error(fn, inputs: list[np.ndarray], rng: np.random.Generator) -> float:
    """Max FD error of ``sum(w * fn(*inputs))`` over each input in turn."""
    out_shape = fn(*[Tensor(a) for a in inputs]).shape
    w = _project(rng, out_shape)
    worst = 0.0
    for i in range(len(inputs)):
        def f(x, i=i):
            args = [Tensor(a) for a in inputs]
            args[i] = x
            return (fn(*args) * w).sum()

        worst = max(worst, finite_difference_check(f, inputs[i]))
    return worst


def _away_from_zero(rng, shape, lo=0.2, hi=1.5):
    return rng.uniform(lo, hi, size=shape) * rng.choice([-1.0, 1.0], size=shape)


def op_cases(rng: np.random.Generator) -> dict:
    """name -> (fn, inputs); inputs avoid kinks and domain edges."""
    a = rng.standard_normal((3, 4))
    b = rng.standard_normal((3, 4))
    pos = rng.uniform(0.5, 2.0, size=(3, 4))
    smat = sp.random(5, 3, density=0.6, random_state=np.random.RandomState(int(rng.integers(2**31))), format="csr")
    masks = rng.random((3, 6)) > 0.3
    masks[:2, :] = True
    return {
        "add": (lambda x, y: x + y, [a, b]),
        "add-broadcast": (lambda x, y: x + y, [a, rng.standard_normal(4)]),
        "sub": (lambda x, y: x - y, [a, b]),
        "hadamard": (lambda x, y: x * y, [a, b]),
        "div": (lambda x, y: x / y, [a, pos]),
        "scalar-mul": (lambda x: x * 2.5, [a]),
        "matmul": (lambda x, y: x @ y, [a, rng.standard_normal((4, 2))]),
        "matmul-batched": (lambda x, y: x @ y, [rng.standard_normal((2, 3, 4)), rng.standard_normal((2, 4, 5))]),
        "sum": (lambda x: x.sum(axis=1), [a]),
        "mean": (lambda x: x.mean(axis=0), [a]),
        "exp": (lambda x: x.exp(), [a]),
        "log": (lambda x: x.log(), [pos]),
        "sqrt": (lambda x: x.sqrt(), [pos]),
        "square": (lambda x: x.square(), [a]),
        "sigmoid": (lambda x: x.sigmoid(), [a]),
        "relu": (lambda x: x.relu(), [_away_from_zero(rng, (3, 4))]),
        "softplus": (lambda x: x.softplus(), [a]),
        "softmax": (lambda x: x.softmax(axis=-1), [a]),
        "norm": (lambda x: x.norm(axis=-1), [a]),
        "slice": (lambda x: x[1:, ::2], [a]),
        "slice-fancy": (lambda x: x[np.array([0, 2, 0])], [a]),
        "broadcast": (lambda x: x.broadcast_to((3, 4)), [rng.standard_normal((1, 4))]),
        "transpose": (lambda x: x.transpose(), [a]),
        "reshape": (lambda x: x.reshape(4, 3), [a]),
        "concat": (lambda x, y: concat([x, y], axis=0), [a, b]),
        "sparse-matmul": (lambda x: sparse_matmul(smat, x), [rng.standard_normal((3, 2))]),
        "personalized-linear": (
            lambda h, al, wa, z: personalized_linear(h, al, wa, z),
            [rng.standard_normal((5, 3)), rng.uniform(0.1, 0.9, 5), rng.standard_normal((3, 4)), rng.standard_normal((3, 4))],
        ),
        "masked-variance": (lambda x: masked_variance(x, masks), [rng.standard_normal((3, 6, 2))]),
        "masked-mean-variance": (lambda x: masked_variance(x, masks, with_mean=True), [rng.standard_normal((3, 6, 2))]),
        "volume-render": (
            lambda c, s: volume_render(c, s, np.full((2, 4), 0.3), (1.0, 1.0, 1.0))[0],
            [rng.uniform(0.1, 0.9, (2, 4, 3)), rng.uniform(0.2, 2.0, (2, 4))],
        ),
    }


def probe_surrogate() -> tuple[float, np.ndarray]:
    """Backward of the step quantizer at the probe offsets vs the long-tailed slope."""
    u = np.array(PROBES)
    x = Tensor(u.copy(), requires_grad=True)
    theta = Tensor(np.zeros_like(u), requires_grad=True)
    with Tape() as tape:
        out = step_quantize(x, theta)
        grads = tape.backward(out.sum())
    expected = long_tailed_slope(u)
    err = float(max(np.max(np.abs(grads[x] - expected)), np.max(np.abs(grads[theta] + expected))))
    return err, grads[x]


def smooth_step(f, steps=(1e-3, 1e-4, 1e-5, 1e-6)) -> float:
    """Step at which central differences of ``f`` (a function of a 1-vector) are most stable.

    A relu kink inside the stencil spoils large steps and cancellation spoils
    small ones; pick the step whose estimate best agrees with the next smaller.
    """

    def central(h):
        return float((f(Tensor(np.array([h]))).data - f(Tensor(np.array([-h]))).data) / (2.0 * h))

    est = [central(h) for h in steps]
    gaps = [abs(a - b) for a, b in zip(est, est[1:])]
    return steps[int(np.argmin(gaps))]


def micro_config() -> Config:
    return Config(
        resolution=12, channels=4, width=4, grid_x=4, grid_y=4, grid_z=3, rank=2, latent=4,
        pe_x=1, pe_d=1, batch_rays=2, samples=4, cost_stats="mean_var",
    )


def end_to_end_errors(seed: int = 0, directions: int = 2) -> dict[str, float]:
    """FD error of the full training loss w.r.t. every parameter tensor of a tiny model.

    Each tensor is checked through directional derivatives along
    ``directions`` seeded random directions, which covers all coordinates
    at once.  The mask is
    held constant (its step has no derivative to compare against).
    """
    from .camera import RigSpec, arc_rig, rays_for_pixels
    from .model import OPONeRF, RigContext, encode, render_rays
    from .scene import generate_scene, render_gt_view
    from .train import diversity_loss, photometric_loss, total_loss

    cfg = micro_config()
    rng = np.random.default_rng(seed)
    cams = arc_rig(RigSpec(n_views=3, width=cfg.resolution, height=cfg.resolution))
    scene = generate_scene(2, seed)
    images = [render_gt_view(scene, c) for c in cams]
    model = OPONeRF(cfg, rng)
    ctx = RigContext.build(model, cams)
    cam = cams[1]
    us = np.array([5, 7])
    vs = np.array([6, 5])
    o, d = rays_for_pixels(cam, us, vs)
    target = images[1].data[vs, us]
    eps = rng.standard_normal((cfg.batch_rays * cfg.samples, cfg.channels))
    params = model.parameters()
    # evaluate at a generic point: zero biases and tiny codes put many
    # pre-activations on relu kinks and shrink gradients below the error floor
    for name in sorted(params):
        params[name].data = rng.normal(0.0, 0.5, size=params[name].shape)

    def loss():
        vols = encode(model, images, ctx)
        out = render_rays(model, vols, o, d, cam.near, cam.far, scene.background, eps=eps, frozen_mask=True)
        l_div = diversity_loss(out.a_grid, 3)
        return total_loss(photometric_loss(out.rgb, target), out.l_appr, out.l_rec, l_div, cfg.gamma, 1.0)

    pick = np.random.default_rng(seed + 1)
    errors = {}
    for name in sorted(params):
        original = params[name]
        worst = 0.0
        for _ in range(directions):
            v = pick.standard_normal(original.shape)

            def f(t, name=name, original=original, v=v):
                # loss along the line original + t * v
                model.set_parameter(name, Tensor(original.data) + t * v)
                try:
                    return loss()
                finally:
                    model.set_parameter(name, original)

            worst = max(worst, finite_difference_check(f, np.zeros(1), eps=smooth_step(f)))
        errors[name] = worst
    return errors


def run_suite(seeds=(0,), end_to_end: bool = True) -> list[CheckResult]:
    results = []
    for seed in seeds:
        rng = np.random.default_rng(seed)
        for name, (fn, inputs) in op_cases(rng).items():
            err = multi_input_error(fn, inputs, rng)
            results.append(CheckResult(f"{name}[seed={seed}]", err, err < TOLERANCE))
    err, _ = probe_surrogate()
    results.append(CheckResult("step-surrogate-probes", err, err == 0.0))
    if end_to_end:
        for name, err in end_to_end_errors().items():
            results.append(CheckResult(f"end-to-end:{name}", err, err < TOLERANCE))
    return results


def main_report(seeds=(0,)) -> tuple[bool, str]:
    t0 = time.time()
    results = run_suite(seeds)
    lines = [f"{'PASS' if r.passed else 'FAIL'}  {r.name:<48} {r.error:.3e}" for r in results]
    ok = all(r.passed for r in results)
    lines.append(f"{sum(r.passed for r in results)}/{len(results)} checks passed in {time.time() - t0:.1f}s")
    return ok, "\n".join(lines)
