"""Central finite-difference check of analytic parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

# gradients smaller than this are compared absolutely; a relative error is meaningless near 0
ABS_FLOOR = 1e-6


@dataclass
class GradCheckResult:
    names: list[str]
    analytic: np.ndarray
    numeric: np.ndarray

    @property
    def rel_errors(self) -> np.ndarray:
        scale = np.maximum(np.maximum(np.abs(self.analytic), np.abs(self.numeric)), ABS_FLOOR)
        return np.abs(self.analytic - self.numeric) / scale

    @property
    def max_rel_error(self) -> float:
        return float(self.rel_errors.max())

    def __len__(self):
        return len(self.names)


def sample_entries(module: torch.nn.Module, n: int, seed: int = 0):
    """Pick ``n`` (name, flat index) pairs, spread over every trainable tensor."""
    params = [(name, p) for name, p in module.named_parameters() if p.requires_grad]
    if not params:
        raise ValueError("module has no trainable parameters")
    rng = np.random.default_rng(seed)
    picks = []
    # one entry from every tensor first, then uniform over all scalars
    for name, p in params:
        picks.append((name, int(rng.integers(p.numel()))))
    sizes = np.array([p.numel() for _, p in params], dtype=float)
    while len(picks) < n:
        k = int(rng.choice(len(params), p=sizes / sizes.sum()))
        name, p = params[k]
        picks.append((name, int(rng.integers(p.numel()))))
    return picks[: max(n, len(params))]


def check_gradients(module: torch.nn.Module, loss_fn, n: int = 100, h: float = 1e-3, seed: int = 0) -> GradCheckResult:
    """Compare autograd against (L(θ+h) - L(θ-h)) / 2h on sampled scalars.

    ``module`` must already be float64; ``loss_fn()`` recomputes the loss from scratch.
    """
    params = dict(module.named_parameters())
    if any(p.dtype != torch.float64 for p in params.values()):
        raise TypeError("gradient check requires a float64 module")
    module.zero_grad()
    loss_fn().backward()
    picks = sample_entries(module, n, seed)
    analytic, numeric = [], []
    with torch.no_grad():
        for name, idx in picks:
            p = params[name]
            flat = p.view(-1)
            analytic.append(float(p.grad.view(-1)[idx]))
            orig = float(flat[idx])
            flat[idx] = orig + h
            up = float(loss_fn())
            flat[idx] = orig - h
            down = float(loss_fn())
            flat[idx] = orig
            numeric.append((up - down) / (2 * h))
    names = [f"{name}[{idx}]" for name, idx in picks]
    return GradCheckResult(names, np.array(analytic), np.array(numeric))


def perturb(module: torch.nn.Module, std: float, seed: int = 0) -> torch.nn.Module:
    """Add N(0, std^2) noise to every trainable parameter, in place.

    Small-init transformers keep LayerNorm inputs at a spread of a few 1e-2, where
    a step of 1e-3 is no longer in the linear regime of the loss. Checking at a
    perturbed point keeps the truncation error of the central difference small.
    """
    g = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in module.parameters():
            if p.requires_grad:
                p.add_(std * torch.randn(p.shape, generator=g, dtype=p.dtype))
    return module
