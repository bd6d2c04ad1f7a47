"""Command-line surface: train, eval, classify, bench, gradcheck, saliency, synth.

Every command is reproducible for a fixed seed.  Exit codes: 0 success,
1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .network import (
    Classifier,
    DivergenceError,
    TrainConfig,
    count_costs,
    default_config,
    evaluate,
    load_checkpoint,
    ModelConfig,
    prepare_dataset,
    saliency,
    save_checkpoint,
    train,
    write_log_csv,
)
from .pointcloud import (
    DEFAULT_CLASSES,
    ParseError,
    load,
    load_dataset,
    normalize,
    resample,
    save_dataset,
    synth_dataset,
    write_xyz,
)
from .verify import run_scope

EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

MECHANISM_FLAGS = {"basic": "basic", "offset": "offset", "ascn": "ascn_residual", "pa": "pa_residual"}
OPERATOR_FLAGS = {
    "dot": "dot", "concat": "concatenation", "sum": "summation",
    "sub": "subtraction", "div": "division", "hadamard": "hadamard",
}


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ctpoint", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def add_model_flags(sp):
        sp.add_argument("--config", help="JSON run config; flags override file values")
        sp.add_argument("--points", type=int, help="points per cloud (default 256)")
        sp.add_argument("--scales", type=int, choices=(1, 3), help="grouping scales per module")
        sp.add_argument("--mechanism", choices=sorted(MECHANISM_FLAGS), help="attention mechanism")
        sp.add_argument("--operator", choices=sorted(OPERATOR_FLAGS), help="attention operator")
        sp.add_argument("--pos-enc", choices=("on", "off"), help="learnable position encoding")
        sp.add_argument("--no-hierarchy", action="store_true", help="run both modules at full resolution")
        sp.add_argument("--no-lfa", action="store_true", help="replace local aggregation with point embedding")
        sp.add_argument("--no-gfl", action="store_true", help="drop the attention blocks")

    sp = sub.add_parser("train", help="train a model and write a run directory")
    add_model_flags(sp)
    sp.add_argument("--train-data", help="training dataset manifest (JSON)")
    sp.add_argument("--test-data", help="test dataset manifest (JSON)")
    sp.add_argument("--out", required=True, help="run directory")
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--batch-size", type=int)
    sp.add_argument("--lr", type=float)
    sp.add_argument("--seed", type=int)
    sp.add_argument("--stop-train-acc", type=float, help="early stop threshold on train accuracy")
    sp.add_argument("--stop-test-macc", type=float, help="early stop threshold on test mAcc")

    sp = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data", required=True, help="dataset manifest (JSON)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--batch-size", type=int, default=16)

    sp = sub.add_parser("classify", help="classify a single cloud file")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True, help="cloud file (xyz/off/ply)")
    sp.add_argument("--top", type=int, default=3)
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("bench", help="parameter/FLOP table over the ablation grid")
    sp.add_argument("--points", type=int, default=1024)
    sp.add_argument("--classes", type=int, default=40)
    sp.add_argument("--out", help="also write the table as CSV")

    sp = sub.add_parser("gradcheck", help="finite-difference verification suites")
    sp.add_argument("--scope", choices=("ops", "blocks", "model", "all"), default="all")

    sp = sub.add_parser("saliency", help="score per-point class attribution")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--input", required=True)
    sp.add_argument("--class-id", type=int, required=True)
    sp.add_argument("--out", required=True, help="output XYZ path (7th column = score)")
    sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    sp.add_argument("--classes", default="all", help="comma-separated shape names or 'all'")
    sp.add_argument("--per-class", type=int, default=100)
    sp.add_argument("--points", type=int, default=256)
    sp.add_argument("--noise", type=float, default=0.01)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--split", default="train")
    sp.add_argument("--out", required=True)
    return p


def _load_run_config(path: str | None) -> dict:
    if path is None:
        return {}
    if not os.path.exists(path):
        raise FileNotFoundError(f"config file not found: {path}")
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: malformed JSON config ({exc})") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: config root must be a JSON object")
    return doc


def _model_config(args, file_cfg: dict, classes: int) -> ModelConfig:
    """Build the model config: file values first, flags override."""
    model_doc = dict(file_cfg.get("model", {}))
    if model_doc and not any(
        getattr(args, name, None) is not None
        for name in ("points", "scales", "mechanism", "operator", "pos_enc")
    ) and not (args.no_hierarchy or args.no_lfa or args.no_gfl):
        model_doc.setdefault("classes", classes)
        return ModelConfig.from_dict(model_doc)

    def pick(flag, key, default):
        v = getattr(args, flag, None)
        if v is not None:
            return v
        return model_doc.get(key, file_cfg.get(key, default))

    mech = pick("mechanism", "mechanism", "offset")
    op = pick("operator", "operator", "sub")
    pos = pick("pos_enc", "position_encoding", "on")
    return default_config(
        points=int(pick("points", "points", 256)),
        classes=classes,
        scales=int(pick("scales", "scales", 3)),
        mechanism=MECHANISM_FLAGS.get(mech, mech),
        operator=OPERATOR_FLAGS.get(op, op),
        position_encoding=(pos if isinstance(pos, bool) else pos == "on"),
        hierarchy=not args.no_hierarchy,
        use_lfa=not args.no_lfa,
        use_gfl=not args.no_gfl,
    )


def _require_file(path: str, what: str) -> str:
    if not os.path.exists(path):
        raise FileNotFoundError(f"{what} not found: {path}")
    return path


def cmd_train(args) -> int:
    file_cfg = _load_run_config(args.config)
    data_doc = file_cfg.get("data", {})
    train_path = args.train_data or data_doc.get("train_manifest")
    if not train_path:
        raise UsageError("train needs --train-data (or data.train_manifest in --config)")
    test_path = args.test_data or data_doc.get("test_manifest")

    train_set = load_dataset(_require_file(train_path, "training manifest"))
    test_set = load_dataset(_require_file(test_path, "test manifest")) if test_path else None
    if test_set is not None and test_set.class_names != train_set.class_names:
        raise ParseError("train/test manifests disagree on class names")

    model_cfg = _model_config(args, file_cfg, classes=len(train_set.class_names))
    train_doc = dict(file_cfg.get("train", {}))
    for flag, key in (
        ("epochs", "epochs"), ("batch_size", "batch_size"), ("lr", "lr"),
        ("seed", "seed"), ("stop_train_acc", "stop_train_acc"),
        ("stop_test_macc", "stop_test_macc"),
    ):
        v = getattr(args, flag, None)
        if v is not None:
            train_doc[key] = v
    train_cfg = TrainConfig.from_dict(train_doc)

    os.makedirs(args.out, exist_ok=True)
    effective = {
        "model": model_cfg.to_dict(),
        "train": train_cfg.to_dict(),
        "data": {"train_manifest": train_path, "test_manifest": test_path},
        "out": args.out,
        "seed": train_cfg.seed,
    }
    with open(os.path.join(args.out, "run_config.json"), "w") as fh:
        json.dump(effective, fh, indent=1)

    train_data = prepare_dataset(train_set, model_cfg.points, seed=train_cfg.seed)
    test_data = prepare_dataset(test_set, model_cfg.points, seed=train_cfg.seed + 1) if test_set else None

    model = Classifier(model_cfg, seed=train_cfg.seed)
    def hook(row):
        print(
            f"epoch {row['epoch']:3d}  lr {row['lr']:.5f}  loss {row['train_loss']:.4f}  "
            f"train_acc {row['train_acc']:.4f}  test_mAcc {row['test_mAcc'] if row['test_mAcc'] != '' else '-'}",
            flush=True,
        )
    result = train(model, train_data, test_data, train_cfg, log_hook=hook)

    write_log_csv(result.log_rows, os.path.join(args.out, "log.csv"))
    save_checkpoint(
        os.path.join(args.out, "checkpoint.json"),
        model,
        optimizer=result.optimizer,
        epoch=result.epochs_run,
        seed=train_cfg.seed,
        train_config=train_cfg,
        class_names=train_set.class_names,
    )
    if result.final_metrics is not None:
        m = result.final_metrics
        print(f"final test mAcc {m.mean_class_accuracy:.4f} OA {m.overall_accuracy:.4f}")
        with open(os.path.join(args.out, "metrics.json"), "w") as fh:
            json.dump(
                {
                    "mAcc": m.mean_class_accuracy,
                    "OA": m.overall_accuracy,
                    "confusion": m.confusion.tolist(),
                    "epochs_run": result.epochs_run,
                },
                fh, indent=1,
            )
    print(f"run directory: {args.out}")
    return 0


def cmd_eval(args) -> int:
    model, doc = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    dataset = load_dataset(_require_file(args.data, "dataset manifest"))
    if len(dataset.class_names) != model.config.classes:
        raise ParseError(
            f"dataset has {len(dataset.class_names)} classes, model expects {model.config.classes}"
        )
    data = prepare_dataset(dataset, model.config.points, seed=args.seed)
    metrics = evaluate(model, data.positions, data.normals, data.labels, batch=args.batch_size)
    print(f"mAcc {metrics.mean_class_accuracy:.4f}")
    print(f"OA   {metrics.overall_accuracy:.4f}")
    print("confusion (rows = true, cols = predicted):")
    names = doc.get("class_names") or dataset.class_names
    width = max(len(n) for n in names)
    for i, row in enumerate(metrics.confusion):
        print(f"  {names[i]:>{width}s} " + " ".join(f"{v:4d}" for v in row))
    return 0


def _prepare_single(path: str, points: int, seed: int):
    cloud = load(_require_file(path, "cloud file"))
    cloud = resample(cloud, points, seed=seed) if len(cloud) != points else cloud
    return normalize(cloud)


def cmd_classify(args) -> int:
    model, doc = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    cloud = _prepare_single(args.input, model.config.points, args.seed)
    from .autodiff import no_grad

    with no_grad():
        logits = model.forward(cloud.positions[None], cloud.normals[None], train=False).data[0]
    shifted = logits - logits.max()
    probs = np.exp(shifted) / np.exp(shifted).sum()
    names = doc.get("class_names") or [str(i) for i in range(model.config.classes)]
    order = np.argsort(-probs)[: args.top]
    for rank, idx in enumerate(order, start=1):
        print(f"{rank}. {names[idx]}  p={probs[idx]:.4f}")
    return 0


def cmd_bench(args) -> int:
    rows = []

    def add_row(label, cfg):
        report = count_costs(cfg)
        rows.append((label, report.parameters, report.macs, report.flops))

    for scales, tag in ((3, "multi-scale"), (1, "single-scale")):
        add_row(tag, default_config(points=args.points, classes=args.classes, scales=scales))
    for flag, mech in sorted(MECHANISM_FLAGS.items()):
        add_row(f"mechanism={flag}", default_config(
            points=args.points, classes=args.classes, mechanism=mech))
    for flag, op in sorted(OPERATOR_FLAGS.items()):
        add_row(f"operator={flag}", default_config(
            points=args.points, classes=args.classes, operator=op))

    header = f"{'configuration':<20s} {'params':>12s} {'MACs':>16s} {'FLOPs':>16s}"
    print(f"costs at N={args.points}, C={args.classes} (FLOPs = 2 x MACs)")
    print(header)
    for label, p, m, f in rows:
        print(f"{label:<20s} {p:>12,d} {m:>16,d} {f:>16,d}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write("configuration,parameters,macs,flops\n")
            for label, p, m, f in rows:
                fh.write(f"{label},{p},{m},{f}\n")
        print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    scopes = ("ops", "blocks", "model") if args.scope == "all" else (args.scope,)
    failed = False
    for scope in scopes:
        reports = run_scope(scope)
        for name, report in reports.items():
            status = "pass" if report["passed"] else "FAIL"
            print(f"[{scope}] {name:35s} max rel err {report['max_rel_err']:.3e}  {status}")
            failed |= not report["passed"]
    if failed:
        print("gradient check FAILED", file=sys.stderr)
        return EXIT_NUMERIC
    return 0


def cmd_saliency(args) -> int:
    model, doc = load_checkpoint(_require_file(args.checkpoint, "checkpoint"))
    cloud = _prepare_single(args.input, model.config.points, args.seed)
    result = saliency(model, cloud.positions, cloud.normals, args.class_id)
    if result.degenerate:
        print("warning: saliency map is degenerate (all-zero scores)", file=sys.stderr)
    write_xyz(cloud, args.out, scores=result.scores)
    print(f"wrote {args.out}")
    return 0


def cmd_synth(args) -> int:
    if args.classes == "all":
        classes = list(DEFAULT_CLASSES)
    else:
        classes = [c.strip() for c in args.classes.split(",") if c.strip()]
    dataset = synth_dataset(
        classes, per_class=args.per_class, points=args.points,
        noise_sigma=args.noise, seed=args.seed, split=args.split,
    )
    manifest = save_dataset(dataset, args.out)
    print(f"wrote {len(dataset)} clouds; manifest: {manifest}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "classify": cmd_classify,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
    "saliency": cmd_saliency,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FileNotFoundError, ParseError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except DivergenceError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
