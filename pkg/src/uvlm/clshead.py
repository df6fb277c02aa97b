"""Query-based multi-label classification head over the deepest encoder feature."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .encoder import standardize_positions

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class ClsHeadConfig:
    in_channels: int
    n_classes: int = 3
    n_queries: int = 16
    dim: int = 32
    heads: int = 4

    def __post_init__(self):
        if self.n_queries < 1:
            raise ValueError("need at least one query")
        if self.dim % self.heads:
            raise ValueError(f"query dim {self.dim} not divisible by {self.heads} heads")

    def to_dict(self) -> dict:
        return dict(vars(self))


def flatten_tokens(feature: torch.Tensor) -> torch.Tensor:
    """(B, C, D, H, W) -> (B, D*H*W, C) in z-major raster order."""
    return feature.flatten(2).transpose(1, 2)


class QueryClassifier(nn.Module):
    """sigmoid(Linear(Flatten(CrossAttn(Q, f_N)))).

    f_N positions become tokens without any positional encoding, so the
    output is invariant to the order of those tokens. f_N is standardized
    per channel over positions before it is tokenized.
    """

    def __init__(self, cfg: ClsHeadConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.dim
        self.token_proj = nn.Linear(cfg.in_channels, d)
        self.token_norm = nn.LayerNorm(d)
        self.queries = nn.Parameter(torch.randn(cfg.n_queries, d) * 0.02)
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        self.fc = nn.Linear(cfg.n_queries * d, cfg.n_classes)
        self.last_attention = None

    def attend(self, tokens: torch.Tensor) -> torch.Tensor:
        B, S, _ = tokens.shape
        h, d = self.cfg.heads, self.cfg.dim
        dh = d // h
        kv = self.token_norm(self.token_proj(tokens))
        q = self.q(self.queries).view(1, -1, h, dh).transpose(1, 2).expand(B, -1, -1, -1)
        k = self.k(kv).view(B, S, h, dh).transpose(1, 2)
        v = self.v(kv).view(B, S, h, dh).transpose(1, 2)
        attn = (q @ k.transpose(-2, -1) / math.sqrt(dh)).softmax(-1)
        self.last_attention = attn.detach()
        ctx = (attn @ v).transpose(1, 2).reshape(B, -1, d)
        return self.out(ctx)

    def logits(self, deepest: torch.Tensor) -> torch.Tensor:
        if deepest.shape[1] != self.cfg.in_channels:
            raise ValueError(
                f"deepest feature has {deepest.shape[1]} channels, head expects {self.cfg.in_channels}"
            )
        ctx = self.attend(flatten_tokens(standardize_positions(deepest)))
        return self.fc(ctx.flatten(1))

    def forward(self, pyramid) -> torch.Tensor:
        deepest = pyramid[-1] if isinstance(pyramid, (list, tuple)) else pyramid
        return torch.sigmoid(self.logits(deepest))


def classify(pyramid, head: QueryClassifier) -> torch.Tensor:
    return head(pyramid)


def cls_loss(probs: torch.Tensor, y) -> torch.Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    y = torch.as_tensor(y, dtype=probs.dtype)
    if y.shape != probs.shape:
        raise ValueError(f"label shape {tuple(y.shape)} does not match predictions {tuple(probs.shape)}")
    p = probs.clamp(BCE_CLAMP, 1.0 - BCE_CLAMP)
    return -(y * torch.log(p) + (1.0 - y) * torch.log1p(-p)).mean()


class ClassifierNet(nn.Module):
    """Encoder + classification head (the Stage-2 model)."""

    def __init__(self, encoder: nn.Module, head: QueryClassifier):
        super().__init__()
        self.encoder = encoder
        self.head = head

    def forward(self, x):
        return self.head(self.encoder(x))
