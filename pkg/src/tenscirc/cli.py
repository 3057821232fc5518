"""Command-line interface: ``tenscirc <command> ...``."""
from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys

import numpy as np

from .bench import DEFAULT_GUARD_BYTES, bench
from .circuit import compile_circuit, fold
from .data import MixtureGenerator, load_csv, load_idx, save_csv, synth
from .exceptions import TensCircError
from .factorization import compress_tucker_circuit
from .inference import log_partition, marginal, sample
from .learning import TrainConfig, bpd, needs_partition, normalize, train
from .region_graph import RG_KINDS, build_region_graph
from .serialization import load_circuit, save_circuit

__all__ = ["main", "build_parser"]


def _default_seed() -> int:
    return int(os.environ.get("TENSCIRC_SEED", "0"))


def _int_list(text):
    return [int(v) for v in text.split(",") if v.strip()] if text else []


def _load_data(path, categories=None, labels=None):
    """CSV or IDX (``*.idx``, ``*-ubyte``, ``*.gz``) data files."""
    if path.endswith(".csv"):
        if categories:
            with open(path, newline="") as fh:
                first = next(csv.reader(fh))
            schema = [f"categorical:{categories}"] * len(first)
            return load_csv(path, schema)
        return load_csv(path)
    return load_idx(path, labels)


def _write_metrics(path, history):
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=["epoch", "train_nll", "valid_nll", "bpd", "wall_ms"])
        wr.writeheader()
        for row in history:
            wr.writerow({k: row[k] for k in wr.fieldnames})


def cmd_rg_build(args):
    data = None
    if args.kind == "cl":
        if not args.data:
            raise TensCircError("--data is required for --kind cl")
        data = _load_data(args.data, args.categories).values
    order = _int_list(args.order) or None
    rg = build_region_graph(args.kind, num_vars=args.num_vars, height=args.height, width=args.width,
                            seed=args.seed, ordering=order, delta=args.delta, data=data,
                            num_categories=args.categories)
    text = rg.to_text()
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.dot:
        with open(args.dot, "w") as fh:
            fh.write(rg.to_dot())
    print(f"regions={len(rg.regions)} partitions={len(rg.partitions)} tree={rg.is_tree()}", file=sys.stderr)
    return 0


def cmd_train(args):
    train_ds = _load_data(args.data, args.categories)
    valid_ds = _load_data(args.valid, args.categories) if args.valid else None
    d = train_ds.num_vars
    h, w = args.height, args.width
    if (h is None or w is None) and train_ds.image_shape is not None:
        h, w = train_ds.image_shape
    if h is None or w is None:
        side = int(round(math.sqrt(d)))
        h, w = (side, side) if side * side == d else (1, d)
    rg = build_region_graph(args.rg, num_vars=d, height=h, width=w, seed=args.seed,
                            data=train_ds.values if args.rg == "cl" else None,
                            num_categories=args.categories)
    fams = train_ds.families
    c = compile_circuit(rg, args.K, args.layer, fams, reparam=args.reparam, learn_mixing=args.learn_mixing,
                        folded=True, seed=args.seed)
    config = TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs, patience=args.patience,
                         seed=args.seed, verbose=args.verbose)
    trained, history = train(c, train_ds.values, None if valid_ds is None else valid_ds.values, config)
    if args.metrics:
        _write_metrics(args.metrics, history)
    if args.out:
        save_circuit(trained, args.out)
    result = {"nomenclature": trained.meta["nomenclature"], "epochs": len(history),
              "final_bpd": history[-1]["bpd"] if history else None}
    if args.test:
        result["test_bpd"] = bpd(trained, _load_data(args.test, args.categories).values)
    print(json.dumps(result))
    return 0


def cmd_eval(args):
    c = load_circuit(args.circuit)
    ds = _load_data(args.data, args.categories)
    ll = marginal(c, ds.values, _int_list(args.marginalize))
    log_z = log_partition(c) if needs_partition(c) else 0.0
    ll = ll - log_z
    d = (c.circuit if hasattr(c, "circuit") else c).num_vars
    if args.out:
        np.savetxt(args.out, ll, fmt="%.17g")
    print(json.dumps({"n": int(len(ll)), "mean_log_likelihood": float(ll.mean()),
                      "bpd": float(-ll.mean() / (d * math.log(2.0))), "log_z": log_z}))
    return 0


def cmd_sample(args):
    c = load_circuit(args.circuit)
    c = normalize(c.circuit if hasattr(c, "circuit") else c)
    x = sample(c, args.n, args.seed)
    save_csv(args.out, x)
    print(json.dumps({"n": args.n, "out": args.out}))
    return 0


def cmd_compress(args):
    c = load_circuit(args.circuit)
    mode = {"cp": "none", "cps": "cps", "cpxs": "cpxs"}[args.mode]
    out = compress_tucker_circuit(c, args.rank, mode, seed=args.seed)
    result = {"nomenclature": out.meta["nomenclature"], "params": out.param_count(),
              "residuals_max": max(out.meta["compression"]["residuals"])}
    if args.finetune:
        if not args.data:
            raise TensCircError("--finetune needs --data")
        tr = _load_data(args.data, args.categories).values
        va = _load_data(args.valid, args.categories).values if args.valid else None
        out, history = train(out, tr, va, TrainConfig(lr=args.lr, batch_size=args.batch, epochs=args.epochs,
                                                      patience=args.patience, seed=args.seed))
        result["finetune_epochs"] = len(history)
    save_circuit(fold(out) if args.mode != "cp" else out, args.out)
    print(json.dumps(result))
    return 0


def cmd_bench(args):
    rows = []
    for arch in args.arch:
        rep = bench(arch, args.height, args.width, args.batch, args.reps, args.warmup,
                    int(args.guard_mb * 1024 * 1024), args.categories, args.seed, not args.forward_only)
        rows.append(rep.as_row())
    fields = list(rows[0].keys())
    out = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        wr = csv.DictWriter(out, fieldnames=fields)
        wr.writeheader()
        wr.writerows(rows)
    finally:
        if args.out:
            out.close()
    return 0


def cmd_synth(args):
    gen = MixtureGenerator.random(args.vars, args.components, args.categories, args.concentration, args.seed)
    sample_seed = args.seed + 1 if args.sample_seed is None else args.sample_seed
    ds = synth(gen, args.n, sample_seed)
    save_csv(args.out, ds.values)
    print(json.dumps({"n": args.n, "d": args.vars, "entropy_nats": ds.meta["entropy_nats"],
                      "entropy_bpd": ds.meta["entropy_bpd"],
                      "entropy_bracket_nats": list(ds.meta["entropy_bracket_nats"])}))
    return 0


def build_parser() -> argparse.ArgumentParser:
    seed = _default_seed()
    p = argparse.ArgumentParser(prog="tenscirc", description="Tensorized probabilistic circuits")
    sub = p.add_subparsers(dest="command", required=True)

    rg = sub.add_parser("rg", help="region graph tools")
    rgs = rg.add_subparsers(dest="rg_command", required=True)
    b = rgs.add_parser("build", help="build a region graph and print it")
    b.add_argument("--kind", choices=RG_KINDS, required=True)
    b.add_argument("--num-vars", type=int)
    b.add_argument("--height", type=int)
    b.add_argument("--width", type=int)
    b.add_argument("--delta", type=int)
    b.add_argument("--order", help="comma-separated variable ordering for lt")
    b.add_argument("--data", help="training data for cl")
    b.add_argument("--categories", type=int)
    b.add_argument("--seed", type=int, default=seed)
    b.add_argument("--out")
    b.add_argument("--dot")
    b.set_defaults(func=cmd_rg_build)

    t = sub.add_parser("train", help="compile and train a circuit")
    t.add_argument("--data", required=True)
    t.add_argument("--valid")
    t.add_argument("--test")
    t.add_argument("--categories", type=int, help="categories per column for CSV data")
    t.add_argument("--rg", choices=RG_KINDS, default="qg")
    t.add_argument("--layer", choices=["tucker", "cp", "cpt", "cps", "cpxs"], default="cp")
    t.add_argument("-K", type=int, default=8)
    t.add_argument("--height", type=int)
    t.add_argument("--width", type=int)
    t.add_argument("--reparam", choices=["clamp", "softmax", "exp"], default="clamp")
    t.add_argument("--learn-mixing", action="store_true")
    t.add_argument("--lr", type=float, default=1e-2)
    t.add_argument("--batch", type=int, default=256)
    t.add_argument("--epochs", type=int, default=200)
    t.add_argument("--patience", type=int, default=5)
    t.add_argument("--seed", type=int, default=seed)
    t.add_argument("--out")
    t.add_argument("--metrics")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="log-likelihoods of a dataset")
    e.add_argument("--circuit", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--categories", type=int)
    e.add_argument("--marginalize", help="comma-separated variables to marginalize")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    s = sub.add_parser("sample", help="draw samples")
    s.add_argument("--circuit", required=True)
    s.add_argument("-n", type=int, required=True)
    s.add_argument("--seed", type=int, default=seed)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    c = sub.add_parser("compress", help="compress Tucker blocks into CP blocks")
    c.add_argument("--circuit", required=True)
    c.add_argument("--rank", type=int, required=True)
    c.add_argument("--mode", choices=["cp", "cps", "cpxs"], default="cp")
    c.add_argument("--finetune", action="store_true")
    c.add_argument("--data")
    c.add_argument("--valid")
    c.add_argument("--categories", type=int)
    c.add_argument("--lr", type=float, default=1e-2)
    c.add_argument("--batch", type=int, default=256)
    c.add_argument("--epochs", type=int, default=200)
    c.add_argument("--patience", type=int, default=5)
    c.add_argument("--seed", type=int, default=seed)
    c.add_argument("--out", required=True)
    c.set_defaults(func=cmd_compress)

    be = sub.add_parser("bench", help="time architectures")
    be.add_argument("--arch", nargs="+", required=True, help='names such as "QG-CP-16"')
    be.add_argument("--height", type=int, default=28)
    be.add_argument("--width", type=int, default=28)
    be.add_argument("--batch", type=int, default=128)
    be.add_argument("--reps", type=int, default=20)
    be.add_argument("--warmup", type=int, default=3)
    be.add_argument("--categories", type=int, default=256)
    be.add_argument("--guard-mb", type=float, default=DEFAULT_GUARD_BYTES / 1024**2)
    be.add_argument("--forward-only", action="store_true")
    be.add_argument("--seed", type=int, default=seed)
    be.add_argument("--out")
    be.set_defaults(func=cmd_bench)

    sy = sub.add_parser("synth", help="sample a synthetic mixture dataset")
    sy.add_argument("--vars", type=int, default=16)
    sy.add_argument("--components", type=int, default=3)
    sy.add_argument("--categories", type=int, default=2)
    sy.add_argument("--concentration", type=float, default=0.3)
    sy.add_argument("-n", type=int, default=5000)
    sy.add_argument("--seed", type=int, default=seed, help="seed of the mixture parameters")
    sy.add_argument("--sample-seed", type=int, default=None,
                    help="seed of the draws (default: --seed + 1); vary it for held-out splits")
    sy.add_argument("--out", required=True)
    sy.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (TensCircError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
