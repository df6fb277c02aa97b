"""Small decoder-only language model conditioned on injected visual tokens.

The input sequence is ``K`` vision slots (one shared learned embedding) followed
by the text tokens. Before each transformer layer the injection plan adds
projected encoder features to the vision slots; attention uses the hybrid
mask (vision slots see each other, text is causal and sees all vision slots).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .injection import INJECTION_MODES, AlignConfig, InjectionPlan, build_hybrid_mask, inject, layer_sources
from .vocab import BOS, EOS, PAD, Vocab

FULL_DECODER = {"n_layers": 8, "d_model": 512, "heads": 8}
DESK_DECODER = {"n_layers": 4, "d_model": 64, "heads": 4}
# vocabulary size assumed for the full-scale parameter count
FULL_VOCAB_SIZE = 151_936
FULL_MAX_LEN = 512


@dataclass(frozen=True)
class DecoderConfig:
    vocab_size: int
    n_layers: int = 4
    d_model: int = 64
    heads: int = 4
    max_len: int = 64
    injection_mode: str = "multi_layer"
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.d_model % self.heads:
            raise ValueError(f"d_model {self.d_model} not divisible by {self.heads} heads")
        if self.injection_mode not in INJECTION_MODES:
            raise ValueError(f"injection mode must be one of {INJECTION_MODES}")

    def to_dict(self) -> dict:
        return dict(vars(self))


def full_decoder_config(vocab_size: int = FULL_VOCAB_SIZE) -> DecoderConfig:
    return DecoderConfig(vocab_size=vocab_size, max_len=FULL_MAX_LEN, **FULL_DECODER)


def tokenize(text: str, vocab: Vocab) -> tuple[int, ...]:
    return vocab.encode(text)


def detokenize(tokens, vocab: Vocab) -> str:
    return vocab.decode(tokens)


class DecoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, mlp_ratio: int = 4):
        super().__init__()
        self.heads = heads
        self.ln1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.proj = nn.Linear(d, d)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = nn.Sequential(nn.Linear(d, mlp_ratio * d), nn.GELU(), nn.Linear(mlp_ratio * d, d))

    def attention(self, x, mask):
        B, S, D = x.shape
        dh = D // self.heads
        q, k, v = self.qkv(x).view(B, S, 3, self.heads, dh).permute(2, 0, 3, 1, 4)
        scores = q @ k.transpose(-2, -1) / math.sqrt(dh)
        scores = scores.masked_fill(~mask, float("-inf"))
        out = scores.softmax(-1) @ v
        return self.proj(out.transpose(1, 2).reshape(B, S, D))

    def forward(self, x, mask):
        x = x + self.attention(self.ln1(x), mask)
        return x + self.mlp(self.ln2(x))


class ReportDecoder(nn.Module):
    def __init__(self, cfg: DecoderConfig, stage_channels, align_cfg: AlignConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.d_model
        self.tok_emb = nn.Embedding(cfg.vocab_size, d)
        self.pos_emb = nn.Parameter(torch.zeros(cfg.max_len, d))
        self.vis_emb = nn.Parameter(torch.zeros(d))
        self.blocks = nn.ModuleList(DecoderBlock(d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.n_layers))
        self.ln_f = nn.LayerNorm(d)
        self.plan = InjectionPlan(stage_channels, cfg.n_layers, d, align_cfg, cfg.injection_mode)
        for name, p in self.named_parameters():
            if name.startswith("plan."):
                continue
            if p.dim() >= 2 or name in ("pos_emb", "vis_emb"):
                nn.init.normal_(p, std=0.02)
            elif name.endswith("bias"):
                nn.init.zeros_(p)

    @property
    def K(self) -> int:
        return self.plan.K

    def forward(self, visual, tokens: torch.Tensor) -> torch.Tensor:
        """Logits (B, T, V) for the text positions.

        ``visual`` is the encoder pyramid or its pre-aligned blocks.
        """
        if tokens.dim() == 1:
            tokens = tokens[None]
        B, T = tokens.shape
        if T > self.cfg.max_len:
            raise ValueError(f"sequence length {T} exceeds max_len {self.cfg.max_len}")
        K = self.K
        text = self.tok_emb(tokens) + self.pos_emb[:T]
        x = torch.cat([self.vis_emb.expand(B, K, -1).to(text.dtype), text], dim=1)
        mask = build_hybrid_mask(K, T).to(x.device)
        for j, block in enumerate(self.blocks, start=1):
            x = inject(x, self.plan, visual, j)
            x = block(x, mask)
        h = self.ln_f(x[:, K:])
        return h @ self.tok_emb.weight.T


def lm_loss(logits: torch.Tensor, tokens: torch.Tensor) -> torch.Tensor:
    """Mean next-token NLL with targets = tokens shifted left, PAD ignored."""
    if tokens.dim() == 1:
        tokens, logits = tokens[None], logits[None]
    pred = logits[:, :-1]
    target = tokens[:, 1:]
    return F.cross_entropy(pred.reshape(-1, pred.shape[-1]), target.reshape(-1).long(), ignore_index=PAD)


@torch.no_grad()
def generate(decoder: ReportDecoder, visual, max_len: int) -> list[tuple[int, ...]]:
    """Greedy decoding from BOS; stops at EOS or after ``max_len`` new tokens.

    ``torch.argmax`` returns the first maximal index, so ties go to the lowest id.
    """
    if max_len + 1 > decoder.cfg.max_len:
        raise ValueError(f"max_len {max_len} leaves no room under decoder limit {decoder.cfg.max_len}")
    ref = next(v for v in visual if v is not None)
    B = ref.shape[0]
    seq = torch.full((B, 1), BOS, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    for _ in range(max_len):
        nxt = decoder(visual, seq)[:, -1].argmax(-1)
        nxt = torch.where(done, torch.full_like(nxt, PAD), nxt)
        seq = torch.cat([seq, nxt[:, None]], dim=1)
        done |= nxt == EOS
        if bool(done.all()):
            break
    out = []
    for row in seq.tolist():
        toks = []
        for t in row:
            if t == PAD:
                break
            toks.append(t)
            if t == EOS:
                break
        out.append(tuple(toks))
    return out


def count_parameters(cfg: DecoderConfig, stage_channels) -> int:
    """Closed-form parameter count of :class:`ReportDecoder` (no allocation)."""
    d, h = cfg.d_model, cfg.mlp_ratio * cfg.d_model
    per_block = 2 * d + (3 * d * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d)
    total = cfg.vocab_size * d + cfg.max_len * d + d + cfg.n_layers * per_block + 2 * d
    for s in layer_sources(cfg.injection_mode, len(stage_channels), cfg.n_layers):
        if s is not None:
            total += stage_channels[s - 1] * d + d + 2 * d
    return total


class ReportModel(nn.Module):
    """Encoder + decoder (the Stage-3 model)."""

    def __init__(self, encoder: nn.Module, lm: ReportDecoder):
        super().__init__()
        self.encoder = encoder
        self.lm = lm

    def visual(self, volumes: torch.Tensor):
        return self.lm.plan.align_all(self.encoder(volumes))

    def forward(self, volumes, tokens):
        return self.lm(self.visual(volumes), tokens)
