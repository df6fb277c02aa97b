"""Command-line entry point: ``uvlm {datagen,train,eval,ablate,plot}``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .checkpoint import StageCheckpoint
from .encoder import ConfigError
from .pipeline import (
    DESK_STEPS,
    TABLE_HEADER,
    AblationRow,
    ArchConfig,
    StagePlan,
    TransferError,
    evaluate_classifier,
    evaluate_report_model,
    evaluate_segmentation,
    model_from_checkpoint,
    optimizer_for,
    regranulate,
    run_ablation,
    run_stage,
    write_run,
    write_table,
)
from .synthvol import GRANULARITIES, check_divisible, default_case_spec, export_dataset, load_dataset, make_dataset

STAGE_NAMES = {"1": "seg", "2": "cls", "3": "rep"}
INJECTION_FLAGS = {"multi": "multi_layer", "input": "input_only", "none": "none"}

BUILTIN_MATRICES = {
    "curriculum": [
        {"label": "none-rep", "curriculum": "None->Rep"},
        {"label": "cls-rep", "curriculum": "Cls->Rep"},
        {"label": "seg-rep", "curriculum": "Seg(C+L)->Rep"},
        {"label": "seg-cls-rep", "curriculum": "Seg(C+L)->Cls->Rep"},
    ],
    "injection": [
        {"label": "multi-layer", "curriculum": "Seg(C+L)->Cls->Rep", "sc": True},
        {"label": "input-only", "curriculum": "Seg(C+L)->Cls->Rep", "sc": False},
    ],
    "freeze": [
        {"label": "frozen", "curriculum": "Seg(C+L)->Cls->Rep", "frz": True},
        {"label": "unfrozen", "curriculum": "Seg(C+L)->Cls->Rep", "frz": False},
    ],
}

PRESET_HELP = """\
presets:
  encoder       full: 6 stages, widths 32,64,128,256,320,320 on 256x256x192 volumes
                (128x128x96 training patches); desk: 4 stages, widths 8,16,32,64 on 32x32x16
  decoder       full: 8 layers, width 512, 8 heads (about 0.1B parameters);
                desk: 4 layers, width 64, 4 heads
  optimizers    full: SGD lr 0.01 for segmentation, AdamW lr 2e-5 for classification and
                report generation, encoder lr x0.1 when trained and x0 when frozen, batch 2;
                desk: the same SGD for segmentation, AdamW lr 1e-3 afterwards, same multipliers
  visual tokens 384-preset: the deepest stage sets the token grid (8x8x6 = 384 at full scale);
                3072-preset: the stage above it (16x16x12 = 3072)
  stage 3       defaults to a frozen encoder with multi-layer injection, the best published
                ablation row
"""


class UsageError(Exception):
    pass


class ArgParser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_shape(text: str) -> tuple[int, int, int]:
    try:
        dims = tuple(int(x) for x in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"shape must look like 64x64x32, got {text!r}")
    if len(dims) != 3 or min(dims) <= 0:
        raise argparse.ArgumentTypeError(f"shape must have three positive sizes, got {text!r}")
    return dims


def build_parser() -> argparse.ArgumentParser:
    p = ArgParser(
        prog="uvlm",
        description="Synthetic 3D report generation with staged encoder pretraining.",
        epilog=PRESET_HELP,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=ArgParser)

    g = sub.add_parser("datagen", help="write a synthetic dataset", epilog=PRESET_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    g.add_argument("--cases", type=int, required=True, help="total number of cases")
    g.add_argument("--test", type=int, default=None, help="cases held out for testing (default: 20%%)")
    g.add_argument("--shape", type=parse_shape, default=(32, 32, 16), help="DxHxW, default 32x32x16")
    g.add_argument("--granularity", choices=GRANULARITIES, default="C+L")
    g.add_argument("--classes", type=int, default=3, help="number of lesion classes")
    g.add_argument("--stages", type=int, default=4, help="encoder stage count the shape must support")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", type=Path, required=True)

    t = sub.add_parser("train", help="train one stage", epilog=PRESET_HELP,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    t.add_argument("--stage", choices=sorted(STAGE_NAMES), required=True,
                   help="1 segmentation, 2 classification, 3 report generation")
    t.add_argument("--init", default=None, help="checkpoint to take the encoder from, or 'none' (required for stages 2 and 3)")
    t.add_argument("--freeze", action=argparse.BooleanOptionalAction, default=None,
                   help="freeze the encoder in stage 3 (default on)")
    t.add_argument("--injection", choices=sorted(INJECTION_FLAGS), default=None, help="stage 3 injection (default multi)")
    t.add_argument("--vt", choices=("384-preset", "3072-preset"), default=None)
    t.add_argument("--seg-granularity", choices=GRANULARITIES, default=None)
    t.add_argument("--optim-preset", choices=("full", "desk"), default=None, help="optimizer preset (default full)")
    t.add_argument("--lr", type=float, default=None, help="override the preset base learning rate")
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--seed", type=int, default=None)
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--out", type=Path, required=True, help="run directory")
    t.add_argument("--config", type=Path, default=None, help="JSON file of defaults; flags take precedence")

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--data", type=Path, required=True)
    e.add_argument("--split", choices=("test", "train", "all"), default="test")
    e.add_argument("--out", type=Path, required=True)

    a = sub.add_parser("ablate", help="run an ablation matrix")
    a.add_argument("--matrix", required=True, help=f"JSON file of rows, or one of {sorted(BUILTIN_MATRICES)}")
    a.add_argument("--data", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--seeds", type=int, nargs="+", default=[0])
    a.add_argument("--steps", type=json.loads, default=None, help='JSON step overrides, e.g. \'{"seg": 100}\'')
    a.add_argument("--jobs", type=int, default=1, help="seeds run in parallel subprocesses")

    pl = sub.add_parser("plot", help="render SVG charts from runs or tables")
    pl.add_argument("--run", type=Path, nargs="+", required=True, help="run directories or table.csv files")
    pl.add_argument("--out", type=Path, required=True)
    return p


# ---------------------------------------------------------------- commands


def cmd_datagen(args) -> int:
    if args.cases < 1:
        raise UsageError("--cases must be positive")
    try:
        check_divisible(args.shape, args.stages)
    except ValueError as exc:
        raise UsageError(str(exc))
    n_test = args.test if args.test is not None else args.cases // 5
    if not 0 <= n_test <= args.cases:
        raise UsageError("--test must be between 0 and --cases")
    spec = default_case_spec(args.shape, args.classes, args.granularity)
    ds = make_dataset(spec, args.cases - n_test, n_test, args.seed)
    export_dataset(ds, args.out)
    print(f"spec_hash {spec.hash()}")
    print(f"wrote {args.cases} cases to {args.out}")
    return 0


def _train_settings(args) -> dict:
    """Merge flags > config file > presets."""
    file_cfg = {}
    if args.config is not None:
        if not args.config.exists():
            raise UsageError(f"config file not found: {args.config}")
        file_cfg = json.loads(args.config.read_text())
    stage = STAGE_NAMES[args.stage]
    defaults = {
        "init": None,
        "freeze": stage == "rep",
        "injection": "multi",
        "vt": "384-preset",
        "seg_granularity": "C+L",
        "optim_preset": "full",
        "lr": None,
        "steps": DESK_STEPS[stage],
        "seed": 0,
        "arch": {},
    }
    unknown = set(file_cfg) - set(defaults)
    if unknown:
        raise UsageError(f"unknown config keys: {sorted(unknown)}")
    out = {**defaults, **file_cfg}
    for key in defaults:
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def cmd_train(args) -> int:
    cfg = _train_settings(args)
    stage = STAGE_NAMES[args.stage]
    if stage != "seg" and cfg["init"] is None:
        raise UsageError(f"stage {args.stage} needs --init <checkpoint> or --init none")
    if stage == "seg" and cfg["freeze"]:
        raise UsageError("stage 1 cannot freeze the encoder")
    if stage == "cls" and args.freeze is None:
        cfg["freeze"] = False
    if cfg["injection"] not in INJECTION_FLAGS:
        raise UsageError(f"injection must be one of {sorted(INJECTION_FLAGS)}")
    if not (args.data / "manifest.json").exists():
        raise UsageError(f"no dataset manifest in {args.data}")
    init = None
    if cfg["init"] not in (None, "none"):
        path = Path(cfg["init"])
        if not path.exists():
            raise UsageError(f"checkpoint not found: {path}")
        init = StageCheckpoint.load(path)
    data = load_dataset(args.data)
    arch = ArchConfig(input_shape=tuple(data.spec.shape), n_classes=data.spec.n_classes)
    if cfg["arch"]:
        arch = dataclasses.replace(arch, **{k: tuple(v) if isinstance(v, list) else v for k, v in cfg["arch"].items()})
    if cfg["optim_preset"] not in ("full", "desk"):
        raise UsageError("optim_preset must be full or desk")
    preset = cfg["optim_preset"]
    opt = optimizer_for(stage, cfg["freeze"] if stage != "seg" else None, preset)
    if cfg["lr"] is not None:
        opt = dataclasses.replace(opt, base_lr=float(cfg["lr"]))
    plan = StagePlan(
        stage,
        name=args.out.name,
        arch=arch,
        seg_granularity=cfg["seg_granularity"],
        init_from=init,
        freeze_encoder=bool(cfg["freeze"]),
        injection_mode=INJECTION_FLAGS[cfg["injection"]] if stage == "rep" else None,
        vt_preset=cfg["vt"],
        optimizer=opt,
        steps=int(cfg["steps"]),
        seed=int(cfg["seed"]),
    )
    print(f"stage {args.stage} optimizer {opt.describe()}", flush=True)
    ckpt, log = run_stage(plan, data)
    config = dict(ckpt.config)
    write_run(args.out, config, log, ckpt)
    print(f"final loss {log.losses[-1]:.6f}" if log.losses else "no steps run")
    print(json.dumps({k: v for k, v in log.metrics.items() if not isinstance(v, list)}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    if not args.ckpt.exists():
        raise UsageError(f"checkpoint not found: {args.ckpt}")
    if not (args.data / "manifest.json").exists():
        raise UsageError(f"no dataset manifest in {args.data}")
    ckpt = StageCheckpoint.load(args.ckpt)
    data = load_dataset(args.data)
    if args.split != "all":
        data = data.subset(args.split)
    if len(data) == 0:
        raise UsageError(f"split {args.split!r} is empty")
    model = model_from_checkpoint(ckpt)
    model.eval()
    stage = ckpt.config["stage"]
    name = ckpt.config.get("name", "run")
    args.out.mkdir(parents=True, exist_ok=True)
    if stage == "rep":
        m = evaluate_report_model(model, data, name)
        header, row = list(m.CSV_HEADER), m.csv_row()
    elif stage == "cls":
        m = evaluate_classifier(model, data)
        header = ["run_name", "F1", "Precision", "Recall"]
        row = [name] + [f"{m[k]:.6f}" for k in ("f1", "precision", "recall")]
    else:
        gran = ckpt.config.get("seg_granularity", "C+L")
        data = regranulate(data, gran)
        m = evaluate_segmentation(model, data)
        header = ["run_name", "fg_dice", "mean_class_dice"]
        row = [name] + [f"{m[k]:.6f}" for k in ("fg_dice", "mean_class_dice")]
    with open(args.out / "metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerow(row)
    print(",".join(header))
    print(",".join(row))
    return 0


def _load_matrix(spec: str) -> list[AblationRow]:
    if spec in BUILTIN_MATRICES:
        rows = BUILTIN_MATRICES[spec]
    else:
        path = Path(spec)
        if not path.exists():
            raise UsageError(f"matrix file not found: {spec}")
        rows = json.loads(path.read_text())
    try:
        return [AblationRow.from_dict(r) for r in rows]
    except (KeyError, TypeError) as exc:
        raise UsageError(f"bad matrix row: {exc}")


def _ablate_seed(rows, data_dir, seed, steps):
    return run_ablation(rows, load_dataset(data_dir), seed=seed, steps=steps)


def cmd_ablate(args) -> int:
    rows = _load_matrix(args.matrix)
    labels = [r.label for r in rows]
    if len(set(labels)) != len(labels):
        raise UsageError("duplicate ablation row labels")
    if not (args.data / "manifest.json").exists():
        raise UsageError(f"no dataset manifest in {args.data}")
    if args.jobs > 1 and len(args.seeds) > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            parts = list(pool.map(_ablate_seed, *zip(*[(rows, args.data, s, args.steps) for s in args.seeds])))
    else:
        parts = [_ablate_seed(rows, args.data, s, args.steps) for s in args.seeds]
    results = [r for part in parts for r in part]
    path = write_table(results, args.out / "table.csv")
    print(path.read_text(), end="")
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams["svg.hashsalt"] = "uvlm"
    args.out.mkdir(parents=True, exist_ok=True)
    written = []

    def save(fig, name):
        path = args.out / f"{name}.svg"
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        written.append(path)

    for src in args.run:
        if src.is_dir():
            metrics = src / "metrics.csv"
            if not metrics.exists():
                raise UsageError(f"no metrics.csv in {src}")
            lines = [l for l in metrics.read_text().splitlines() if not l.startswith("#")]
            reader = list(csv.DictReader(lines))
            if "step" not in reader[0]:
                raise UsageError(f"{metrics} is not a training log")
            fig, ax = plt.subplots(figsize=(5, 3))
            ax.plot([int(r["step"]) for r in reader], [float(r["loss"]) for r in reader], lw=1)
            ax.set_xlabel("step")
            ax.set_ylabel("loss")
            ax.set_title(src.name)
            fig.tight_layout()
            save(fig, f"{src.name}_loss")
        elif src.suffix == ".csv" and src.exists():
            reader = list(csv.DictReader(src.open()))
            if not reader or not set(TABLE_HEADER) <= set(reader[0]):
                raise UsageError(f"{src} is not an ablation table")
            labels = sorted({r["label"] for r in reader}, key=[r["label"] for r in reader].index)
            for metric in ("F1", "B-mean"):
                vals = []
                for lab in labels:
                    xs = [float(r[metric]) for r in reader if r["label"] == lab and r[metric] != "nan"]
                    vals.append(sum(xs) / len(xs) if xs else 0.0)
                fig, ax = plt.subplots(figsize=(5, 3))
                ax.bar(range(len(labels)), vals)
                ax.set_xticks(range(len(labels)), labels, rotation=30, ha="right")
                ax.set_ylabel(metric)
                fig.tight_layout()
                save(fig, f"{src.stem}_{metric.replace('-', '_')}")
        else:
            raise UsageError(f"not a run directory or table: {src}")
    for path in written:
        print(path)
    return 0


COMMANDS = {"datagen": cmd_datagen, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate, "plot": cmd_plot}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    except (ConfigError, TransferError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        # --help exits through argparse with code 0
        return int(exc.code or 0)
    except Exception as exc:  # noqa: BLE001
        logging.getLogger("uvlm").debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
