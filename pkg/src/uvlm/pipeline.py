"""Progressive seg -> cls -> rep training with encoder transfer and ablations."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import StageCheckpoint
from .clshead import ClassifierNet, ClsHeadConfig, QueryClassifier, cls_loss
from .encoder import EncoderConfig, ResEncoder, SegmentationNet, seg_loss
from .evalkit import ReportMetrics, dice_score, evaluate_reports, macro_prf
from .injection import AlignConfig, reference_stage_for_preset
from .langdec import DecoderConfig, ReportDecoder, ReportModel, generate, lm_loss
from .synthvol import (
    GRANULARITIES,
    Dataset,
    default_case_spec,
    generate_case,
    make_dataset,
    sample_patch,
    with_granularity,
)
from .vocab import PAD

logger = logging.getLogger(__name__)

STAGES = ("seg", "cls", "rep")
PROVENANCE = {"seg": "stage1", "cls": "stage2", "rep": "stage3"}


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class OptimizerSpec:
    kind: str
    base_lr: float
    encoder_lr_multiplier: float = 1.0
    weight_decay: float = 0.0
    momentum: float = 0.0
    nesterov: bool = False
    betas: tuple[float, float] = (0.9, 0.999)

    def __post_init__(self):
        if self.kind not in ("sgd", "adamw"):
            raise ValueError(f"optimizer kind must be sgd or adamw, got {self.kind!r}")
        if self.encoder_lr_multiplier not in (0.0, 0.1, 1.0):
            raise ValueError("encoder lr multiplier must be one of 0, 0.1, 1")

    def describe(self) -> str:
        return f"{self.kind} lr={self.base_lr:g} encoder_mult={self.encoder_lr_multiplier:g}"


# Optimizer settings as published: SGD 0.01 for segmentation, AdamW 2e-5 afterwards
# with the encoder at 0.1x (unfrozen) or 0x (frozen).
FULL_OPTIMIZERS = {
    "seg": OptimizerSpec("sgd", 0.01, 1.0, weight_decay=3e-5, momentum=0.99, nesterov=True),
    "cls": OptimizerSpec("adamw", 2e-5, 0.1, weight_decay=0.01),
    "rep": OptimizerSpec("adamw", 2e-5, 0.0, weight_decay=0.01),
}
# Same structure, learning rates raised for step budgets of a few hundred updates.
DESK_OPTIMIZERS = {
    "seg": OptimizerSpec("sgd", 0.01, 1.0, weight_decay=3e-5, momentum=0.99, nesterov=True),
    "cls": OptimizerSpec("adamw", 1e-3, 0.1, weight_decay=0.0),
    "rep": OptimizerSpec("adamw", 1e-3, 0.0, weight_decay=0.0),
}

DESK_SHAPE = (32, 32, 16)
DESK_CASES = (200, 50)
DESK_STEPS = {"seg": 800, "cls": 800, "rep": 1200}


def desk_dataset(seed: int = 0) -> Dataset:
    """The standard desk dataset: 200 train / 50 test cases at ``DESK_SHAPE``."""
    return make_dataset(default_case_spec(DESK_SHAPE), *DESK_CASES, seed=seed)


def optimizer_for(stage: str, freeze: bool | None = None, preset: str = "desk") -> OptimizerSpec:
    spec = (FULL_OPTIMIZERS if preset == "full" else DESK_OPTIMIZERS)[stage]
    if stage == "seg" or freeze is None:
        return spec
    return dataclasses.replace(spec, encoder_lr_multiplier=0.0 if freeze else 0.1)


@dataclass(frozen=True)
class ArchConfig:
    """Architecture shared by every stage of one curriculum."""

    input_shape: tuple[int, int, int] = DESK_SHAPE
    n_classes: int = 3
    encoder_channels: tuple[int, ...] = (8, 16, 32, 64)
    blocks_per_stage: int = 1
    cls_queries: int = 16
    cls_dim: int = 32
    cls_heads: int = 4
    lm_layers: int = 4
    lm_dim: int = 64
    lm_heads: int = 4
    lm_max_len: int = 64

    def encoder_config(self, n_seg_classes: int = 2) -> EncoderConfig:
        return EncoderConfig(self.encoder_channels, n_seg_classes, 1, self.blocks_per_stage)

    def cls_config(self) -> ClsHeadConfig:
        return ClsHeadConfig(self.encoder_channels[-1], self.n_classes, self.cls_queries, self.cls_dim, self.cls_heads)

    def decoder_config(self, injection_mode: str) -> DecoderConfig:
        from .vocab import Vocab

        return DecoderConfig(
            len(Vocab.for_classes(self.n_classes)),
            self.lm_layers,
            self.lm_dim,
            self.lm_heads,
            self.lm_max_len,
            injection_mode,
        )

    def align_config(self, vt_preset: str) -> AlignConfig:
        n = len(self.encoder_channels)
        return AlignConfig.for_input(self.input_shape, n, reference_stage_for_preset(vt_preset, n))

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        d = dict(d)
        d["input_shape"] = tuple(d["input_shape"])
        d["encoder_channels"] = tuple(d["encoder_channels"])
        return cls(**d)


@dataclass(frozen=True)
class StagePlan:
    stage: str
    name: str = "run"
    arch: ArchConfig = field(default_factory=ArchConfig)
    seg_granularity: str = "C+L"
    init_from: StageCheckpoint | None = None
    freeze_encoder: bool = False
    injection_mode: str | None = None
    vt_preset: str = "384-preset"
    optimizer: OptimizerSpec | None = None
    steps: int = 100
    batch_size: int = 2
    seed: int = 0
    patch_shape: tuple[int, int, int] | None = None
    evaluate: bool = True

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"stage must be one of {STAGES}, got {self.stage!r}")
        if self.seg_granularity not in GRANULARITIES:
            raise ValueError(f"seg granularity must be one of {GRANULARITIES}")
        if self.stage == "rep" and self.injection_mode is None:
            raise ValueError("report-generation plans must specify injection_mode")
        if self.optimizer is None:
            object.__setattr__(self, "optimizer", optimizer_for(self.stage, self.freeze_encoder))
        if self.stage == "seg" and self.freeze_encoder:
            raise ValueError("segmentation pretraining cannot freeze the encoder")
        if (self.optimizer.encoder_lr_multiplier == 0.0) != self.freeze_encoder:
            raise ValueError("encoder lr multiplier 0 must coincide with freeze_encoder")

    def echo(self) -> dict:
        d = {
            "stage": self.stage,
            "name": self.name,
            "arch": self.arch.to_dict(),
            "seg_granularity": self.seg_granularity,
            "init_from": None,
            "freeze_encoder": self.freeze_encoder,
            "injection_mode": self.injection_mode,
            "vt_preset": self.vt_preset,
            "optimizer": json.loads(json.dumps(dataclasses.asdict(self.optimizer))),
            "steps": self.steps,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "patch_shape": list(self.patch_shape) if self.patch_shape else None,
        }
        if self.init_from is not None:
            digest = hashlib.sha256(self.init_from.to_bytes()).hexdigest()[:16]
            d["init_from"] = f"{self.init_from.module}:{digest}"
        return d


@dataclass
class StageLog:
    header: str
    losses: list[float] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)

    def write_csv(self, path) -> None:
        keys = [k for k in ("f1", "bleu_mean") if k in self.metrics]
        with open(path, "w", newline="") as fh:
            fh.write(f"# {self.header}\n")
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "loss"] + keys)
            for i, loss in enumerate(self.losses, start=1):
                extra = [f"{self.metrics[k]:.6f}" for k in keys] if i == len(self.losses) else [""] * len(keys)
                w.writerow([i, f"{loss:.8f}"] + extra)


# ---------------------------------------------------------------- models


def build_model(stage: str, arch: ArchConfig, n_seg_classes: int = 2, injection_mode="multi_layer", vt_preset="384-preset"):
    if stage == "seg":
        return SegmentationNet(arch.encoder_config(n_seg_classes))
    encoder = ResEncoder(arch.encoder_config(n_seg_classes))
    if stage == "cls":
        return ClassifierNet(encoder, QueryClassifier(arch.cls_config()))
    lm = ReportDecoder(arch.decoder_config(injection_mode), arch.encoder_channels, arch.align_config(vt_preset))
    return ReportModel(encoder, lm)


def model_from_checkpoint(ckpt: StageCheckpoint):
    cfg = ckpt.config
    stage = cfg["stage"]
    model = build_model(
        stage,
        ArchConfig.from_dict(cfg["arch"]),
        cfg.get("n_seg_classes", 2),
        cfg.get("injection_mode") or "multi_layer",
        cfg.get("vt_preset", "384-preset"),
    )
    model.load_state_dict(ckpt.tensors)
    return model


def _encoder_compatible(src: dict, dst: EncoderConfig) -> None:
    for key in ("channels", "in_channels", "blocks_per_stage"):
        a = src["arch"]["encoder_channels"] if key == "channels" else src["arch"].get(key, 1)
        b = list(dst.channels) if key == "channels" else getattr(dst, key)
        if list(np.atleast_1d(a)) != list(np.atleast_1d(b)):
            raise TransferError(f"encoder config mismatch on {key}: checkpoint {a} vs target {b}")


def transfer_encoder(src: StageCheckpoint, model: torch.nn.Module) -> torch.nn.Module:
    """Copy ``encoder.*`` tensors bit-exactly into ``model``; other tensors stay freshly initialized."""
    theirs = src.subset("encoder.")
    ours = model.encoder.state_dict()
    bad = [
        f"encoder.{k}: {tuple(theirs[k].shape) if k in theirs else 'missing'} vs {tuple(v.shape)}"
        for k, v in ours.items()
        if k not in theirs or theirs[k].shape != v.shape
    ]
    bad += [f"encoder.{k}: unexpected" for k in theirs if k not in ours]
    if bad:
        raise TransferError("incompatible encoder tensors: " + "; ".join(bad))
    with torch.no_grad():
        for k, v in ours.items():
            v.copy_(theirs[k])
    return model


def build_optimizer(model: torch.nn.Module, spec: OptimizerSpec, freeze_encoder: bool):
    enc = [p for p in model.encoder.parameters()]
    enc_ids = {id(p) for p in enc}
    rest = [p for p in model.parameters() if id(p) not in enc_ids]
    groups = [{"params": rest, "lr": spec.base_lr}]
    if freeze_encoder:
        for p in enc:
            p.requires_grad_(False)
    else:
        groups.append({"params": enc, "lr": spec.base_lr * spec.encoder_lr_multiplier})
    if spec.kind == "sgd":
        return torch.optim.SGD(groups, lr=spec.base_lr, momentum=spec.momentum, nesterov=spec.nesterov, weight_decay=spec.weight_decay)
    return torch.optim.AdamW(groups, lr=spec.base_lr, betas=spec.betas, weight_decay=spec.weight_decay)


# ---------------------------------------------------------------- data helpers


def granularity_of(ds: Dataset) -> str:
    if ds.spec.granularity == "fine":
        return "F+L"
    return "C+L" if ds.spec.lesion_labels else "C"


def regranulate(ds: Dataset, preset: str) -> Dataset:
    """Same cases, masks re-annotated at another granularity (images are unchanged)."""
    if granularity_of(ds) == preset:
        return ds
    spec = with_granularity(ds.spec, preset)
    masks = np.stack([generate_case(int(s), spec).mask for s in ds.seeds])
    return dataclasses.replace(ds, spec=spec, masks=masks)


def pad_tokens(reports) -> torch.Tensor:
    seqs = [r.tokens if hasattr(r, "tokens") else tuple(r) for r in reports]
    T = max(len(s) for s in seqs)
    out = torch.full((len(seqs), T), PAD, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.tensor(s)
    return out


def _volumes(ds: Dataset, idx) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(ds.volumes[idx]))[:, None]


class BatchSampler:
    """Deterministic epoch-wise shuffling driven by a Philox stream."""

    def __init__(self, n: int, batch_size: int, seed: int):
        self.n, self.bs = n, min(batch_size, n)
        self.rng = np.random.Generator(np.random.Philox(key=int(seed)))
        self.order, self.pos = self.rng.permutation(n), 0

    def next(self) -> np.ndarray:
        if self.pos + self.bs > self.n:
            self.order, self.pos = self.rng.permutation(self.n), 0
        idx = self.order[self.pos : self.pos + self.bs]
        self.pos += self.bs
        return np.sort(idx)


@torch.no_grad()
def _visual_cache(model: ReportModel, ds: Dataset, chunk: int = 16):
    blocks = None
    for start in range(0, len(ds), chunk):
        vis = model.visual(_volumes(ds, np.arange(start, min(start + chunk, len(ds)))))
        if blocks is None:
            blocks = [[] if v is not None else None for v in vis]
        for acc, v in zip(blocks, vis):
            if acc is not None:
                acc.append(v)
    return [torch.cat(b) if b is not None else None for b in blocks]


def _take(vis, idx):
    idx = torch.as_tensor(idx)
    return [v[idx] if v is not None else None for v in vis]


# ---------------------------------------------------------------- evaluation


@torch.no_grad()
def evaluate_segmentation(model: SegmentationNet, ds: Dataset, chunk: int = 8) -> dict:
    preds = []
    for start in range(0, len(ds), chunk):
        preds.append(model(_volumes(ds, np.arange(start, min(start + chunk, len(ds))))).argmax(1).numpy())
    pred = np.concatenate(preds)
    fg_pred, fg_gt = (pred > 0).astype(np.uint8), (ds.masks > 0).astype(np.uint8)
    per_class = [dice_score(pred, ds.masks, c) for c in range(1, ds.spec.n_seg_classes)]
    return {"fg_dice": dice_score(fg_pred, fg_gt, 1), "mean_class_dice": float(np.mean(per_class))}


@torch.no_grad()
def predict_labels(model: ClassifierNet, ds: Dataset, chunk: int = 16) -> np.ndarray:
    probs = [model(_volumes(ds, np.arange(s, min(s + chunk, len(ds))))) for s in range(0, len(ds), chunk)]
    return (torch.cat(probs).numpy() >= 0.5).astype(np.uint8)


def evaluate_classifier(model: ClassifierNet, ds: Dataset) -> dict:
    f1, p, r = macro_prf(predict_labels(model, ds), ds.labels)
    return {"f1": f1, "precision": p, "recall": r}


@torch.no_grad()
def generate_reports(model: ReportModel, ds: Dataset, max_len: int | None = None, visual=None, chunk: int = 25):
    max_len = max_len or min(model.lm.cfg.max_len - 1, 2 * max(len(r) for r in ds.reports))
    visual = visual if visual is not None else _visual_cache(model, ds)
    out = []
    for s in range(0, len(ds), chunk):
        out += generate(model.lm, _take(visual, np.arange(s, min(s + chunk, len(ds)))), max_len)
    return out


def evaluate_report_model(model: ReportModel, ds: Dataset, run_name: str = "run", visual=None) -> ReportMetrics:
    hyps = generate_reports(model, ds, visual=visual)
    return evaluate_reports(hyps, ds.reports, ds.labels, ds.spec.n_classes, run_name)


# ---------------------------------------------------------------- training


def run_stage(plan: StagePlan, data: Dataset, out_dir=None):
    """Train one stage; returns (checkpoint, log). ``data`` holds train and test splits."""
    torch.manual_seed(plan.seed)
    if plan.stage == "seg" and granularity_of(data) != plan.seg_granularity:
        data = regranulate(data, plan.seg_granularity)
    train = data.subset("train")
    test = data.subset("test")
    if len(train) == 0:
        raise ValueError("no training cases")
    n_seg = data.spec.n_seg_classes if plan.stage == "seg" else 2
    model = build_model(plan.stage, plan.arch, n_seg, plan.injection_mode or "multi_layer", plan.vt_preset)
    if plan.init_from is not None:
        _encoder_compatible(plan.init_from.config, model.encoder.cfg)
        transfer_encoder(plan.init_from, model)
    opt = build_optimizer(model, plan.optimizer, plan.freeze_encoder)
    log = StageLog(f"stage={plan.stage} optimizer {plan.optimizer.describe()} freeze={plan.freeze_encoder}")
    logger.info("%s: %s", plan.name, log.header)

    sampler = BatchSampler(len(train), plan.batch_size, plan.seed)
    labels = torch.from_numpy(train.labels.astype(np.float32))
    tokens = pad_tokens(train.reports) if plan.stage == "rep" else None
    cache = _visual_cache(model, train) if plan.stage == "rep" and plan.freeze_encoder else None
    if plan.freeze_encoder:
        model.encoder.eval()

    for step in range(plan.steps):
        idx = sampler.next()
        if plan.stage == "seg":
            vol, mask = train.volumes[idx], train.masks[idx]
            if plan.patch_shape is not None:
                pairs = [
                    sample_patch(v, m, plan.patch_shape, plan.seed * 1_000_003 + step * 8 + i)
                    for i, (v, m) in enumerate(zip(vol, mask))
                ]
                vol, mask = np.stack([p[0] for p in pairs]), np.stack([p[1] for p in pairs])
            loss = seg_loss(model(torch.from_numpy(np.ascontiguousarray(vol))[:, None]), torch.from_numpy(mask.astype(np.int64)))
        elif plan.stage == "cls":
            loss = cls_loss(model(_volumes(train, idx)), labels[idx])
        else:
            visual = _take(cache, idx) if cache is not None else model.visual(_volumes(train, idx))
            tok = tokens[idx]
            loss = lm_loss(model.lm(visual, tok), tok)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        log.losses.append(float(loss.detach()))

    model.eval()
    if plan.evaluate and len(test):
        if plan.stage == "seg":
            log.metrics = evaluate_segmentation(model, test)
        elif plan.stage == "cls":
            log.metrics = evaluate_classifier(model, test)
        else:
            m = evaluate_report_model(model, test, plan.name)
            log.metrics = {"f1": m.F1, "precision": m.Precision, "recall": m.Recall, "bleu_mean": m.B_mean,
                           "bleu": [m.B1, m.B2, m.B3, m.B4], "unparseable": m.unparseable}

    config = plan.echo()
    config["n_seg_classes"] = n_seg
    ckpt = StageCheckpoint(PROVENANCE[plan.stage], config, dict(model.state_dict()))
    if out_dir is not None:
        write_run(Path(out_dir) / plan.name, config, log, ckpt)
    return ckpt, log


def write_run(run_dir: Path, config: dict, log: StageLog, ckpt: StageCheckpoint) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.echo").write_text(json.dumps(config, indent=1, sort_keys=True) + "\n")
    log.write_csv(run_dir / "metrics.csv")
    ckpt.save(run_dir / "ckpt_final")
    return run_dir


# ---------------------------------------------------------------- ablations

_SEG_RE = re.compile(r"^Seg\((C|C\+L|F\+L)\)$")


def parse_curriculum(text: str) -> list[tuple[str, str | None]]:
    """'Seg(C+L)->Cls->Rep' -> [('seg','C+L'), ('cls',None), ('rep',None)]; 'None' means random init."""
    parts = [p.strip() for p in re.split(r"->|→", text)]
    stages = []
    for i, p in enumerate(parts):
        if p == "None" and i == 0:
            continue
        m = _SEG_RE.match(p)
        if m:
            stages.append(("seg", m.group(1)))
        elif p == "Cls":
            stages.append(("cls", None))
        elif p == "Rep":
            stages.append(("rep", None))
        else:
            raise ValueError(f"cannot parse curriculum step {p!r} in {text!r}")
    kinds = [s for s, _ in stages]
    if not kinds or kinds != sorted(kinds, key=STAGES.index) or len(set(kinds)) != len(kinds):
        raise ValueError(f"curriculum must be an ordered subset of Seg->Cls->Rep: {text!r}")
    if kinds[-1] == "seg":
        raise ValueError("curriculum must end with Cls or Rep")
    return stages


@dataclass(frozen=True)
class AblationRow:
    label: str
    curriculum: str
    sc: bool = True
    frz: bool = True
    vt: str = "384-preset"

    @classmethod
    def from_dict(cls, d: dict) -> "AblationRow":
        return cls(d["label"], d["curriculum"], bool(d.get("sc", True)), bool(d.get("frz", True)), d.get("vt", "384-preset"))


# Rows behind the curriculum, injection, freeze and stage-2 comparisons.
DESK_TREND_ROWS = (
    AblationRow("none-rep", "None->Rep"),
    AblationRow("cls-rep", "Cls->Rep"),
    AblationRow("seg-cls-rep", "Seg(C+L)->Cls->Rep"),
    AblationRow("seg-cls-rep-input", "Seg(C+L)->Cls->Rep", sc=False),
    AblationRow("seg-cls-rep-unfrozen", "Seg(C+L)->Cls->Rep", frz=False),
    AblationRow("none-cls", "None->Cls"),
    AblationRow("seg-cls", "Seg(C+L)->Cls"),
)

TABLE_HEADER = ("label", "curriculum", "SC", "Frz", "VT", "seed", "F1", "Precision", "Recall", "B-mean")


def run_ablation(rows, data: Dataset, seed: int = 0, arch: ArchConfig | None = None, steps: dict | None = None,
                 out_dir=None, cache: dict | None = None) -> list[dict]:
    """Run every row end to end on the same data and seed; upstream stages are shared between rows."""
    rows = [r if isinstance(r, AblationRow) else AblationRow.from_dict(r) for r in rows]
    labels = [r.label for r in rows]
    dupes = sorted({l for l in labels if labels.count(l) > 1})
    if dupes:
        raise ValueError(f"duplicate ablation row labels: {dupes}")
    arch = arch or ArchConfig(input_shape=tuple(data.spec.shape), n_classes=data.spec.n_classes)
    steps = {**DESK_STEPS, **(steps or {})}
    cache = {} if cache is None else cache
    results = []
    for row in rows:
        stages = parse_curriculum(row.curriculum)
        prefix: tuple = ()
        ckpt, log = None, None
        for kind, gran in stages:
            final = kind == stages[-1][0]
            if kind == "rep":
                key = prefix + (("rep", row.sc, row.frz, row.vt),)
            else:
                key = prefix + ((kind, gran),)
            if key in cache:
                ckpt, log = cache[key]
            else:
                plan = StagePlan(
                    kind,
                    name=f"{row.label}/{kind}" if kind == "rep" else "_".join(f"{k}{g or ''}" for k, g in key),
                    arch=arch,
                    seg_granularity=gran or "C+L",
                    init_from=ckpt,
                    freeze_encoder=row.frz if kind == "rep" else False,
                    injection_mode=("multi_layer" if row.sc else "input_only") if kind == "rep" else None,
                    vt_preset=row.vt,
                    steps=steps[kind],
                    seed=seed,
                    evaluate=final or kind != "seg",
                )
                ckpt, log = run_stage(plan, data)
                cache[key] = (ckpt, log)
            prefix = key
        m = log.metrics
        results.append(
            {
                "label": row.label,
                "curriculum": row.curriculum,
                "SC": int(row.sc),
                "Frz": int(row.frz),
                "VT": row.vt,
                "seed": seed,
                "F1": m.get("f1", float("nan")),
                "Precision": m.get("precision", float("nan")),
                "Recall": m.get("recall", float("nan")),
                "B-mean": m.get("bleu_mean", float("nan")),
            }
        )
    if out_dir is not None:
        write_table(results, Path(out_dir) / "table.csv")
    return results


def write_table(results, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(TABLE_HEADER)
        for r in results:
            w.writerow([r[k] if not isinstance(r[k], float) else f"{r[k]:.6f}" for k in TABLE_HEADER])
    return path
