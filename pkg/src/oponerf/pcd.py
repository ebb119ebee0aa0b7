"""Parameter candidate decoders: scene-conditioned weights for each target layer."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .nn import MLP, Module, gaussian
from .tensor import Tensor, step_quantize

MASK_MODES = ("step", "sigmoid", "zeros")


@dataclass
class PCDConfig:
    channels: int = 16  # width of the pooled scene vector
    rank: int = 8
    hidden: tuple[int, int] = (32, 32)
    code_std: float = 0.02


class PCDLayer(Module):
    """Decoders, codes and upscaling maps for one (c_in x c_out) target layer."""

    def __init__(self, rng: np.random.Generator, cfg: PCDConfig, c_in: int, c_out: int):
        super().__init__()
        r = cfg.rank
        widths = [cfg.channels, *cfg.hidden, r * r]
        self.c_in, self.c_out, self.rank = c_in, c_out, r
        self.dw = MLP(rng, widths, last_gain=1.0)
        self.dm = MLP(rng, widths, last_gain=1.0)
        self.p_in = gaussian(rng, (c_in, r), np.sqrt(1.0 / r))
        self.p_out = gaussian(rng, (r, c_out), np.sqrt(1.0 / r))
        self.p_in_m = gaussian(rng, (c_in, r), np.sqrt(1.0 / r))
        self.p_out_m = gaussian(rng, (r, c_out), np.sqrt(1.0 / r))
        self.modulation = gaussian(rng, (c_in, c_out), cfg.code_std)
        self.code = gaussian(rng, (c_in, c_out), cfg.code_std)  # Z^l, blended by the mask
        self.personal = gaussian(rng, (c_in, c_out), cfg.code_std)  # blended by the adaptiveness factor
        self.threshold = gaussian(rng, (c_in, c_out), cfg.code_std)


class LayerBank(Module):
    def __init__(self, rng: np.random.Generator, cfg: PCDConfig, layer_shapes: list[tuple[int, int]]):
        super().__init__()
        self.cfg = cfg
        self.layers = [PCDLayer(rng, cfg, ci, co) for ci, co in layer_shapes]

    def __len__(self) -> int:
        return len(self.layers)

    def layer(self, l: int) -> PCDLayer:
        if not 0 <= l < len(self.layers):
            raise IndexError(f"target layer {l} out of range 0..{len(self.layers) - 1}")
        return self.layers[l]


def pool_scene(F: Tensor) -> Tensor:
    """Mean of the feature volume over every spatial cell, one value per channel."""
    if not np.all(np.isfinite(F.data)):
        raise ValueError("feature volume is not finite")
    return F.reshape(-1, F.shape[-1]).mean(axis=0)


def _upscale(core_flat: Tensor, p_in: Tensor, p_out: Tensor, r: int) -> Tensor:
    return p_in @ core_flat.reshape(r, r) @ p_out


def decode_soft_weights(bank: LayerBank, g: Tensor, l: int) -> Tensor:
    """W_d = (P_in @ core @ P_out) * E with an r x r core decoded from g."""
    layer = bank.layer(l)
    core = layer.dw(g.reshape(1, -1))
    return _upscale(core, layer.p_in, layer.p_out, layer.rank) * layer.modulation


def mask_logits(bank: LayerBank, g: Tensor, l: int) -> Tensor:
    layer = bank.layer(l)
    core = layer.dm(g.reshape(1, -1))
    return _upscale(core, layer.p_in_m, layer.p_out_m, layer.rank)


def decode_mask(bank: LayerBank, g: Tensor, l: int, mode: str = "step", frozen: bool = False) -> Tensor:
    """Binary mask M^l from the learned element-wise threshold.

    ``mode="sigmoid"`` gives the soft (unquantized) mask and ``"zeros"`` the
    all-zero mask.  ``frozen`` evaluates the mask as a constant, which keeps
    finite-difference sweeps away from the quantizer's jumps.
    """
    if mode not in MASK_MODES:
        raise ValueError(f"unknown mask mode {mode!r}")
    layer = bank.layer(l)
    if mode == "zeros":
        return Tensor(np.zeros((layer.c_in, layer.c_out)))
    if frozen:
        raw = Tensor(mask_logits(bank, g.detach(), l).data)
        theta = Tensor(layer.threshold.data)
    else:
        raw = mask_logits(bank, g, l)
        theta = layer.threshold
    if mode == "sigmoid":
        return (raw - theta).sigmoid()
    return step_quantize(raw, theta)


def candidate_params(bank: LayerBank, g: Tensor, l: int, mode: str = "step", frozen: bool = False) -> Tensor:
    """(J - M) * W_d + M * Z; a binary M selects each element from exactly one source."""
    W_d = decode_soft_weights(bank, g, l)
    M = decode_mask(bank, g, l, mode=mode, frozen=frozen)
    return (1.0 - M) * W_d + M * bank.layer(l).code
