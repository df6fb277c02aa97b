"""Multi-layer visual injection.

Every encoder stage is aligned to the same number of tokens ``K`` (the
position count of a reference stage ``r``): shallower stages are average
pooled down to the reference grid, deeper stages are zero padded. Layer ``j``
of the language decoder receives stage ``N - j + 1`` (deepest stage first);
layers past ``N`` receive nothing.

Grids are always flattened z-major (D, then H, then W), matching
``torch.flatten`` on a (C, D, H, W) tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import standardize_positions

INJECTION_MODES = ("multi_layer", "input_only", "none")

# reference stage offset from the deepest stage; the names give K at full scale
VT_PRESETS = {"384-preset": 0, "3072-preset": 1}


@dataclass(frozen=True)
class AlignConfig:
    reference_stage: int
    reference_grid: tuple[int, int, int]

    @property
    def K(self) -> int:
        return math.prod(self.reference_grid)

    @classmethod
    def for_input(cls, input_shape, n_stages: int, reference_stage: int) -> "AlignConfig":
        if not 1 <= reference_stage <= n_stages:
            raise ValueError(f"reference stage {reference_stage} outside 1..{n_stages}")
        f = 2 ** (reference_stage - 1)
        return cls(reference_stage, tuple(s // f for s in input_shape))


def reference_stage_for_preset(preset: str, n_stages: int) -> int:
    """'384-preset' -> r = N, '3072-preset' -> r = N - 1."""
    try:
        return n_stages - VT_PRESETS[preset]
    except KeyError:
        raise ValueError(f"unknown visual-token preset {preset!r}; choose from {sorted(VT_PRESETS)}") from None


@dataclass
class AlignedTokens:
    tokens: torch.Tensor  # (B, K, C)
    stage: int
    pad_count: int


def align(feature: torch.Tensor, stage: int, cfg: AlignConfig) -> AlignedTokens:
    """Bring a (B, C, d, h, w) stage feature to exactly K tokens."""
    r = cfg.reference_stage
    if stage < r:
        feature = F.adaptive_avg_pool3d(feature, cfg.reference_grid)
    tokens = feature.flatten(2).transpose(1, 2)
    n = tokens.shape[1]
    if stage <= r:
        if n != cfg.K:
            raise ValueError(f"stage {stage} yields {n} tokens at the reference grid, expected K={cfg.K}")
        return AlignedTokens(tokens, stage, 0)
    if n > cfg.K:
        raise ValueError(f"stage {stage} has {n} positions > K={cfg.K}; halving law broken")
    pad = tokens.new_zeros(tokens.shape[0], cfg.K - n, tokens.shape[2])
    return AlignedTokens(torch.cat([tokens, pad], dim=1), stage, cfg.K - n)


def stage_for_layer(j: int, n_stages: int, n_layers: int | None = None) -> int | None:
    """Encoder stage feeding language layer ``j`` (1-based), or None."""
    if n_layers is not None and not 1 <= j <= n_layers:
        raise ValueError(f"layer {j} outside 1..{n_layers}")
    s = n_stages - j + 1
    return s if 1 <= s <= n_stages else None


def build_hybrid_mask(K: int, T: int) -> torch.Tensor:
    """mask[a, b] is True iff position a may attend to b: b < K or b <= a."""
    idx = torch.arange(K + T)
    return (idx[None, :] < K) | (idx[None, :] <= idx[:, None])


def mask_to_text(mask: torch.Tensor) -> str:
    return "".join("".join("1" if v else "0" for v in row.tolist()) + "\n" for row in mask)


def dump_mask(mask: torch.Tensor, path) -> Path:
    path = Path(path)
    path.write_text(mask_to_text(mask))
    return path


def layer_sources(mode: str, n_stages: int, n_layers: int) -> list[int | None]:
    if mode == "multi_layer":
        return [stage_for_layer(j, n_stages, n_layers) for j in range(1, n_layers + 1)]
    if mode == "input_only":
        return [n_stages] + [None] * (n_layers - 1)
    if mode == "none":
        return [None] * n_layers
    raise ValueError(f"injection mode must be one of {INJECTION_MODES}, got {mode!r}")


class InjectionPlan(nn.Module):
    """Per-layer source stage plus Linear -> LayerNorm projection into the LM width.

    Stage features are standardized per channel over their own positions
    before alignment, so zero padding stays zero.
    """

    def __init__(self, stage_channels, n_layers: int, d_model: int, align_cfg: AlignConfig, mode="multi_layer"):
        super().__init__()
        self.stage_channels = tuple(stage_channels)
        self.align_cfg = align_cfg
        self.mode = mode
        self.sources = layer_sources(mode, len(self.stage_channels), n_layers)
        self.proj = nn.ModuleDict()
        for j, s in enumerate(self.sources, start=1):
            if s is not None:
                # inputs are standardized, so the default fan-in init keeps outputs near unit scale
                lin = nn.Linear(self.stage_channels[s - 1], d_model)
                nn.init.zeros_(lin.bias)
                self.proj[str(j)] = nn.Sequential(lin, nn.LayerNorm(d_model))

    @property
    def K(self) -> int:
        return self.align_cfg.K

    def source(self, j: int) -> int | None:
        return self.sources[j - 1]

    def align_all(self, pyramid) -> list[torch.Tensor]:
        """Aligned (B, K, C_s) blocks for every stage some layer consumes (others None)."""
        if len(pyramid) != len(self.stage_channels):
            raise ValueError(f"pyramid has {len(pyramid)} stages, plan expects {len(self.stage_channels)}")
        used = set(s for s in self.sources if s is not None)
        return [self.tokens(f, i) if i in used else None for i, f in enumerate(pyramid, start=1)]

    def tokens(self, feature: torch.Tensor, stage: int) -> torch.Tensor:
        """Standardize a raw stage feature per channel over its positions, then align it."""
        return align(standardize_positions(feature), stage, self.align_cfg).tokens

    def zero_(self) -> "InjectionPlan":
        """Make every projection output exactly zero."""
        with torch.no_grad():
            for p in self.proj.values():
                p[0].weight.zero_()
                p[0].bias.zero_()
                p[1].bias.zero_()
        return self


def inject(h_prev: torch.Tensor, plan: InjectionPlan, visual, j: int) -> torch.Tensor:
    """Add Proj_j(Align(f_s(j))) at the first K positions; text positions are returned untouched.

    ``visual`` is either the raw pyramid (list of 5-D features) or the output
    of :meth:`InjectionPlan.align_all`.
    """
    s = plan.source(j)
    if s is None:
        return h_prev
    if len(visual) != len(plan.stage_channels):
        raise ValueError(f"got {len(visual)} stages, plan expects {len(plan.stage_channels)}")
    block = visual[s - 1]
    if block is None:
        raise ValueError(f"stage {s} was not aligned")
    if block.dim() == 5:
        block = plan.tokens(block, s)
    if block.shape[-1] != plan.stage_channels[s - 1]:
        raise ValueError(f"stage {s} has {block.shape[-1]} channels, plan expects {plan.stage_channels[s - 1]}")
    K = plan.K
    vis = h_prev[:, :K] + plan.proj[str(j)](block.to(h_prev.dtype))
    return torch.cat([vis, h_prev[:, K:]], dim=1)
