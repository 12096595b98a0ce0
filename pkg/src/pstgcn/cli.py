"""Command-line interface: ``pstgcn <command> [options]``."""
from __future__ import annotations

import os

# Thread limits must be in place before numpy loads its BLAS.
_threads = os.environ.get("PSTGCN_THREADS")
if _threads:
    if not _threads.isdigit() or int(_threads) < 1:
        raise SystemExit(f"PSTGCN_THREADS must be a positive integer, got {_threads!r}")
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMBA_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import dataclasses  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from .complexity import complexity_report  # noqa: E402
from .data import generate_synthetic, load_dataset, save_dataset, stratified_split  # noqa: E402
from .descriptor import load_descriptor  # noqa: E402
from .graph import load_topology  # noqa: E402
from .net import build_model, predict_scores  # noqa: E402
from .pipeline import RunConfig, read_scores, run_pipeline, write_predictions, write_scores  # noqa: E402
from .search import SearchConfig  # noqa: E402
from .training import TrainConfig, load_model, save_model, train_final, two_stream_fuse  # noqa: E402

log = logging.getLogger("pstgcn")


def _int_tuple(text: str) -> tuple:
    return tuple(int(v) for v in text.split(",") if v.strip())


def _float_tuple(text: str) -> tuple:
    return tuple(float(v) for v in text.split(",") if v.strip())


_FLAG_TYPES = {"int": int, "float": float, "str": str, "str | None": str,
               "tuple": _int_tuple, "tuple | None": _int_tuple}


def _add_dataclass_flags(parser, cls, skip=()):
    """One ``--field-name`` flag per dataclass field; defaults stay unset so
    that only flags given on the command line override the config file."""
    for f in dataclasses.fields(cls):
        if f.name in skip:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type == "bool":
            parser.add_argument(flag, dest=f.name, action=argparse.BooleanOptionalAction, default=None)
        elif f.type in _FLAG_TYPES:
            parser.add_argument(flag, dest=f.name, type=_FLAG_TYPES[f.type], default=None,
                                metavar=f.name.upper())


def _overrides(args, cls, skip=()) -> dict:
    names = {f.name for f in dataclasses.fields(cls)} - set(skip)
    return {k: v for k, v in vars(args).items() if k in names and v is not None}


def build_run_config(args) -> RunConfig:
    base = json.loads(Path(args.config).read_text()) if args.config else {}
    search = dict(base.pop("search", {}))
    search.update(_overrides(args, SearchConfig))
    base.update(_overrides(args, RunConfig, skip=("search",)))
    return RunConfig(**base, search=SearchConfig(**search))


# ------------------------------------------------------------------ commands


def cmd_search(args) -> int:
    cfg = build_run_config(args)
    if not cfg.dataset:
        raise SystemExit("search: a dataset is required (--dataset or the config file)")
    return run_pipeline(cfg)


def cmd_train(args) -> int:
    dataset = load_dataset(args.dataset)
    if not dataset.mask("val").any():
        dataset = stratified_split(dataset, args.val_fraction, args.seed)
    if args.bones:
        dataset = dataset.to_bones()
    desc = load_descriptor(args.descriptor)
    C, _, V = dataset.shape
    if desc.in_channels != C or desc.num_joints != V or desc.num_classes != dataset.n_class:
        desc = dataclasses.replace(desc, in_channels=C, num_joints=V, num_classes=dataset.n_class)
        log.info("descriptor adapted to the dataset: C=%d V=%d classes=%d", C, V, dataset.n_class)
    model = build_model(desc, dataset.topology, args.seed, np.dtype(args.dtype).type)
    cfg = TrainConfig(epochs=args.epochs, base_lr=args.lr, milestones=args.milestones,
                      momentum=args.momentum, weight_decay=args.weight_decay,
                      batch_size=args.batch_size, seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, tlog = train_final(model, dataset, cfg, checkpoint_path=out / "best.pstg")
    save_model(out / "model.pstg", model)
    (out / "train_log.json").write_text(json.dumps({
        "epochs": tlog.epochs, "best_epoch": tlog.best_epoch,
        "best_val_accuracy": tlog.best_val_accuracy, "aborted": tlog.aborted}, indent=1))
    print(json.dumps(tlog.epochs[-1] if tlog.epochs else {}))
    return 1 if tlog.aborted else 0


def cmd_eval(args) -> int:
    model, _ = load_model(args.checkpoint)
    dataset = load_dataset(args.dataset)
    if args.bones:
        dataset = dataset.to_bones()
    m = dataset.mask(args.split) if args.split != "all" else np.ones(len(dataset), bool)
    if not m.any():
        raise SystemExit(f"eval: dataset has no samples tagged {args.split!r}")
    scores = predict_scores(dataset.x[m], model)
    labels = dataset.labels[m]
    if args.scores_out:
        write_scores(args.scores_out, dataset.ids[m], labels, scores)
    acc = float((scores.argmax(1) == labels).mean())
    print(json.dumps({"split": args.split, "samples": int(m.sum()), "accuracy": acc}))
    return 0


def cmd_complexity(args) -> int:
    desc = load_descriptor(args.descriptor)
    shape = _int_tuple(args.input) if args.input else (desc.in_channels, 300, desc.num_joints)
    report = complexity_report(desc, shape, mac=args.mac, exhaustive=args.exhaustive,
                               streams=args.streams)
    if args.json_out:
        Path(args.json_out).write_text(report.dumps())
    else:
        print(report.dumps())
    print(report.summary())
    return 0


def cmd_gen_synthetic(args) -> int:
    topology = load_topology(args.topology)
    ds = generate_synthetic(args.classes, args.per_class, topology, args.frames, args.noise,
                            args.seed, args.test_fraction)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return 0


def cmd_fuse(args) -> int:
    ids_j, labels_j, sj = read_scores(args.joint)
    ids_b, labels_b, sb = read_scores(args.bone)
    if not np.array_equal(ids_j, ids_b):
        raise SystemExit("fuse: the two score files list different samples")
    alpha = args.fusion_alpha
    alpha = alpha[0] if len(alpha) == 1 else alpha
    pred = two_stream_fuse(sj, sb, alpha)
    write_predictions(args.out, ids_j, labels_j, pred)
    print(json.dumps({"samples": len(pred), "accuracy": float((pred == labels_j).mean())}))
    return 0


# ------------------------------------------------------------------ parser


def make_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pstgcn", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("search", help="progressive topology search from a run config")
    s.add_argument("--config", help="JSON run config; flags override its fields")
    _add_dataclass_flags(s, RunConfig, skip=("search",))
    _add_dataclass_flags(s, SearchConfig, skip=("seed",))
    s.add_argument("--seed", type=int, required=True)
    s.set_defaults(func=cmd_search)

    t = sub.add_parser("train", help="train a fixed topology")
    t.add_argument("--descriptor", required=True, help="descriptor file or preset name")
    t.add_argument("--dataset", required=True)
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--epochs", type=int, default=50)
    t.add_argument("--lr", type=float, default=0.1)
    t.add_argument("--milestones", type=_int_tuple, default=(30, 40))
    t.add_argument("--momentum", type=float, default=0.9)
    t.add_argument("--weight-decay", type=float, default=1e-4)
    t.add_argument("--batch-size", type=int, default=64)
    t.add_argument("--val-fraction", type=float, default=0.2)
    t.add_argument("--dtype", default="float64", choices=("float64", "float32"))
    t.add_argument("--bones", action="store_true", help="train on bone features")
    t.add_argument("--seed", type=int, default=0)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="accuracy of a checkpoint on a dataset split")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test", "all"))
    e.add_argument("--bones", action="store_true")
    e.add_argument("--scores-out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("complexity", help="parameter and FLOP counts of a descriptor")
    c.add_argument("descriptor", help="descriptor file or preset name")
    c.add_argument("--input", help="C,T,V (default: descriptor C and V with T=300)")
    c.add_argument("--mac", type=int, default=2, choices=(1, 2))
    c.add_argument("--exhaustive", action="store_true")
    c.add_argument("--streams", type=int, default=1)
    c.add_argument("--json-out")
    c.set_defaults(func=cmd_complexity)

    g = sub.add_parser("gen-synthetic", help="write a synthetic dataset directory")
    g.add_argument("--out", required=True)
    g.add_argument("--classes", type=int, default=5)
    g.add_argument("--per-class", type=int, default=100)
    g.add_argument("--frames", type=int, default=32)
    g.add_argument("--noise", type=float, default=0.05)
    g.add_argument("--topology", default="toy11")
    g.add_argument("--test-fraction", type=float, default=0.2)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_synthetic)

    f = sub.add_parser("fuse", help="fuse joint and bone score files")
    f.add_argument("--joint", required=True)
    f.add_argument("--bone", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--fusion-alpha", type=_float_tuple, default=(1.0,),
                   help="one weight for both streams, or joint,bone")
    f.set_defaults(func=cmd_fuse)
    return p


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError, KeyError) as exc:
        print(f"pstgcn {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
