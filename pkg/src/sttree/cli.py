"""Command-line entry point.

Exit codes: 0 ok, 1 config error, 2 data error, 3 numeric abort,
4 a verification command found a violation.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
import time

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, load_model, save_checkpoint
from .config import ConfigError, RunConfig, apply_overrides, load_config
from .data import (DataFormatError, Dataset, LabelError, NormStats, load_dataset, pad_dataset,
                   stratified_split, z_normalize)
from .explain import ExplanationError, export_json, render_tree_figure
from .gradcheck import check_model, tiny_model
from .model import STTreeModel
from .trainer import NumericError, TransferError, evaluate, fine_tune, train

log = logging.getLogger("sttree")

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, EXIT_CHECK = 1, 2, 3, 4


class DataError(RuntimeError):
    pass


def _prepare(cfg: RunConfig, stats: NormStats | None = None):
    try:
        train_ds, test_ds = load_dataset(cfg.data_root, cfg.dataset)
    except FileNotFoundError as exc:
        raise DataError(f"dataset file not found: {exc}") from exc
    except (DataFormatError, LabelError) as exc:
        raise DataError(str(exc)) from exc
    train_ds, stats = z_normalize(train_ds, stats)
    test_ds, _ = z_normalize(test_ds, stats)
    m = 4 * cfg.encoder.partition_factor
    return pad_dataset(train_ds, m), pad_dataset(test_ds, m), stats


def _extra(cfg: RunConfig, ds: Dataset, stats: NormStats) -> dict:
    return {
        "dataset": ds.name,
        "class_names": ds.class_names,
        "original_length": ds.original_length,
        "norm_mean": [float(v) for v in stats.mean],
        "norm_std": [float(v) for v in stats.std],
        "run_config": cfg.to_dict(),
    }


def _fit(cfg: RunConfig, train_ds: Dataset, metrics_path=None, progress=None) -> STTreeModel:
    tcfg = cfg.train_config()
    val_ds = None
    fit_ds = train_ds
    if tcfg.patience is not None:
        fit_ds, val_ds = stratified_split(train_ds, tcfg.val_fraction, cfg.seed)
    model = STTreeModel(cfg.model_config(train_ds.num_channels, train_ds.num_classes))
    if cfg.fine_tune_from:
        model, _ = fine_tune(model, cfg.fine_tune_from, fit_ds, val_ds, tcfg, metrics_path)
    else:
        model, _ = train(model, fit_ds, val_ds, tcfg, metrics_path=metrics_path, progress=progress)
    return model


def cmd_train(cfg: RunConfig, args) -> int:
    train_ds, test_ds, stats = _prepare(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    t0 = time.time()
    progress = None
    if args.verbose:
        def progress(row):
            print(f"epoch {row['epoch']:3d} lr {row['lr']:.6f} loss {row['train_loss']:.4f} "
                  f"acc {row['train_acc']:.3f}", flush=True)
    model = _fit(cfg, train_ds, os.path.join(cfg.out, "metrics.csv"), progress)
    save_checkpoint(model, os.path.join(cfg.out, "model.ckpt"), _extra(cfg, train_ds, stats))
    acc = evaluate(model, test_ds)["accuracy"]
    print(f"{cfg.dataset}: test accuracy {acc:.4f} ({time.time() - t0:.1f}s)")
    return 0


def _load_for_eval(cfg: RunConfig, args):
    ckpt = args.checkpoint or os.path.join(cfg.out, "model.ckpt")
    try:
        _, _, manifest = load_checkpoint(ckpt)
        model = load_model(ckpt)
    except (OSError, CheckpointError) as exc:
        raise DataError(f"cannot load checkpoint {ckpt}: {exc}") from exc
    extra = manifest.get("extra", {})
    stats = NormStats(np.asarray(extra["norm_mean"]), np.asarray(extra["norm_std"]))
    if args.dataset is None and extra.get("dataset"):
        cfg.dataset = extra["dataset"]
    m = model.config.encoder.patch_width
    cfg.encoder.partition_factor = m // 4
    train_ds, test_ds, _ = _prepare(cfg, stats)
    return model, train_ds, test_ds


def cmd_evaluate(cfg: RunConfig, args) -> int:
    model, train_ds, test_ds = _load_for_eval(cfg, args)
    ds = train_ds if args.split == "train" else test_ds
    res = evaluate(model, ds)
    print(f"{cfg.dataset} {args.split}: accuracy {res['accuracy']:.4f} "
          f"mean_loss {res['mean_loss']:.4f}")
    for name, a in zip(ds.class_names, res["per_class_accuracy"]):
        print(f"  {name}: {a:.4f}")
    return 0


def cmd_explain(cfg: RunConfig, args) -> int:
    model, train_ds, test_ds = _load_for_eval(cfg, args)
    ds = train_ds if args.split == "train" else test_ds
    if args.samples:
        idx = [int(s) for s in args.samples.split(",")]
    else:
        idx = list(range(min(args.num_samples, len(ds))))
    bad = [i for i in idx if not 0 <= i < len(ds)]
    if bad:
        raise DataError(f"sample index out of range: {bad}")
    out_dir = os.path.join(cfg.out, "explain")
    os.makedirs(out_dir, exist_ok=True)
    for i in idx:
        sid = f"{args.split}_{i}"
        paths = render_tree_figure(model, ds.values[i : i + 1], os.path.join(out_dir, f"{sid}.svg"),
                                   labels=ds.labels[i : i + 1], sample_ids=[sid],
                                   original_length=ds.original_length,
                                   class_names=ds.class_names)
        export_json(paths[0], os.path.join(out_dir, f"{sid}.json"))
        p = paths[0]
        route = " -> ".join(f"{n.i}{n.side[0].upper()}" for n in p.nodes)
        print(f"{sid}: predicted {ds.class_names[p.predicted]} true {ds.class_names[p.true]} "
              f"path {route} -> leaf {p.leaf}")
    return 0


def cmd_gradcheck(cfg: RunConfig, args) -> int:
    model, x, y = tiny_model(num_channels=args.channels, length=args.length,
                             embed_dim=args.embed_dim, depth=args.depth or 2,
                             proto_size=args.proto_size, num_classes=args.classes,
                             batch=args.batch, seed=cfg.seed)
    t0 = time.time()
    rep = check_model(model, x, y)
    for name, err in rep.per_tensor.items():
        print(f"{err:.3e}  {name}")
    status = "ok" if rep.ok(args.tol) else "FAILED"
    print(f"gradcheck {status}: {rep.checked} entries, max rel err {rep.max_rel_err:.3e} "
          f"({rep.worst}), {time.time() - t0:.1f}s")
    return 0 if rep.ok(args.tol) else EXIT_CHECK


def _run_variant(cfg: RunConfig, train_ds, test_ds) -> tuple[float, float, STTreeModel]:
    model = _fit(cfg, train_ds)
    return evaluate(model, train_ds)["accuracy"], evaluate(model, test_ds)["accuracy"], model


def cmd_sweep_depth(cfg: RunConfig, args) -> int:
    train_ds, test_ds, _ = _prepare(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    rows = []
    for depth in args.depths:
        cfg.tree.depth = depth
        t0 = time.time()
        tr_acc, te_acc, model = _run_variant(cfg, train_ds, test_ds)
        rows.append([depth, 2 ** depth, 2 ** depth - 1, model.store.num_scalars(),
                     repr(tr_acc), repr(te_acc), f"{time.time() - t0:.1f}"])
        print(f"depth {depth}: train {tr_acc:.4f} test {te_acc:.4f}", flush=True)
    path = os.path.join(cfg.out, "sweep.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["depth", "leaves", "branches", "parameters", "train_acc", "test_acc", "seconds"])
        w.writerows(rows)
    print(f"wrote {path}")
    return 0


VARIANTS = (("full", False, False), ("no_tree", True, False), ("no_attention", False, True))


def cmd_ablate(cfg: RunConfig, args) -> int:
    train_ds, test_ds, _ = _prepare(cfg)
    os.makedirs(cfg.out, exist_ok=True)
    seeds = [cfg.seed + r for r in range(args.repeats)]
    base_seed = cfg.seed
    table = {}
    for name, no_tree, no_attention in VARIANTS:
        cfg.train.no_tree, cfg.train.no_attention = no_tree, no_attention
        accs = []
        for s in seeds:
            cfg.seed = s
            _, te_acc, _ = _run_variant(cfg, train_ds, test_ds)
            accs.append(te_acc)
            print(f"{name} seed {s}: test {te_acc:.4f}", flush=True)
        table[name] = accs
    cfg.seed = base_seed
    path = os.path.join(cfg.out, "ablation.csv")
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["variant"] + [f"test_acc_seed{s}" for s in seeds] + ["mean_test_acc"])
        for name, accs in table.items():
            w.writerow([name] + [repr(a) for a in accs] + [repr(float(np.mean(accs)))])
    print(f"wrote {path}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "gradcheck": cmd_gradcheck,
    "sweep-depth": cmd_sweep_depth,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat JSON run config")
    common.add_argument("--data-root", dest="data_root",
                        help="dataset root (default: $ST_TREE_DATA or ./data)")
    common.add_argument("--dataset")
    common.add_argument("--depth", type=int)
    common.add_argument("--epochs", type=int)
    common.add_argument("--seed", type=int)
    common.add_argument("--out")
    common.add_argument("--no-tree", dest="no_tree", action="store_true")
    common.add_argument("--no-attention", dest="no_attention", action="store_true")
    common.add_argument("--fine-tune-from", dest="fine_tune_from", metavar="CKPT")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="st-tree", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("train", parents=[common], help="train and write model.ckpt + metrics.csv")
    for name in ("evaluate", "explain"):
        p = sub.add_parser(name, parents=[common])
        p.add_argument("--checkpoint", help="default: <out>/model.ckpt")
        p.add_argument("--split", choices=("train", "test"), default="test")
        if name == "explain":
            p.add_argument("--samples", help="comma-separated instance indices")
            p.add_argument("--num-samples", type=int, default=5)
    g = sub.add_parser("gradcheck", parents=[common], help="finite-difference check on a tiny model")
    g.add_argument("--channels", type=int, default=2)
    g.add_argument("--length", type=int, default=16)
    g.add_argument("--embed-dim", dest="embed_dim", type=int, default=8)
    g.add_argument("--proto-size", dest="proto_size", type=int, default=2)
    g.add_argument("--classes", type=int, default=3)
    g.add_argument("--batch", type=int, default=2)
    g.add_argument("--tol", type=float, default=1e-4)
    s = sub.add_parser("sweep-depth", parents=[common], help="train depths 3..6, write sweep.csv")
    s.add_argument("--depths", type=int, nargs="+", default=[3, 4, 5, 6])
    a = sub.add_parser("ablate", parents=[common], help="full / no_tree / no_attention")
    a.add_argument("--repeats", type=int, default=1)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    cfg = apply_overrides(cfg, args)
    cfg.validate()
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](cfg, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, TransferError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, ExplanationError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
