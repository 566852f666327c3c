"""Command-line interface: synth, ingest, train, evaluate, ablate, gradcheck.

Every command writes one ``manifest.json`` into its output directory with the
config echo, sha256 digests of the inputs, the produced paths and the exit
status. Exit codes: 0 success, 2 input or config error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
import time
from pathlib import Path

import numpy as np

from .graph import (GraphFormatError, GraphValidationError, SbmConfig,
                    generate_sbm, load_attributed_graph, load_dataset_dir,
                    write_attributed_graph)
from .trainer import (ConfigError, TrainConfig, TrainingDiverged,
                      run_gradcheck, save_checkpoint, train)
from . import metrics as met
from . import objectives as obj

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, payload) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _dataset_inputs(data_dir: Path) -> dict[str, str]:
    out = {}
    for name in ("edges.tsv", "features.tsv", "labels.tsv"):
        p = data_dir / name
        if p.exists():
            out[str(p)] = _sha256(p)
    return out


def _config_echo(cfg) -> dict:
    return dataclasses.asdict(cfg)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def _cmd_synth(args, record):
    cfg = SbmConfig(blocks=[int(b) for b in args.blocks.split(",")],
                    p_in=args.p_in, p_out=args.p_out, n_attrs=args.n_attrs,
                    signature_size=args.signature_size, p_sig=args.p_sig,
                    p_noise=args.p_noise, seed=args.seed)
    g = generate_sbm(cfg)
    paths = write_attributed_graph(g, args.out)
    record["config"] = _config_echo(cfg)
    record["outputs"] = [str(p) for p in paths.values()]
    print(f"wrote {g.n_nodes} nodes, {g.n_edges} edges, {g.d_features} attrs -> {args.out}")
    return EXIT_OK


def _cmd_ingest(args, record):
    g = load_attributed_graph(args.edges, args.features, args.labels,
                              drop_self_loops=args.drop_self_loops)
    paths = write_attributed_graph(g, args.out)
    record["inputs"] = {str(p): _sha256(Path(p)) for p in
                        [args.edges, args.features] + ([args.labels] if args.labels else [])}
    record["outputs"] = [str(p) for p in paths.values()]
    print(f"ingested {g.n_nodes} nodes, {g.n_edges} edges, {g.d_features} attrs -> {args.out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, dim=args.dim, learning_rate=args.lr,
        weight_decay=args.weight_decay, lam=args.lam, r1=args.r1, r2=args.r2,
        layers=args.layers, top_k=args.topk, order=args.order, decay=args.decay,
        pair_budget=args.pair_budget, seed=args.seed, loss_mode=args.loss,
        init_mode=args.init, k=args.k, heads=args.heads,
        binary_lift=args.binary_lift, paper_literal_eq3=args.paper_literal_eq3,
        inter_on_cut_edges=args.inter_on_cut_edges)


def _final_metrics(g, assignment) -> dict:
    out = {"modularity": obj.classic_modularity(g, assignment)}
    if g.labels is not None:
        out.update(met.all_metrics(assignment.labels, g.labels))
    return out


def _run_training(g, cfg, out_dir: Path, record, tag: str = "") -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = train(g, cfg)
    except TrainingDiverged as exc:
        ckpt = out_dir / "model.ckpt"
        save_checkpoint(exc.state, ckpt)
        record["outputs"].append(str(ckpt))
        _write_json(out_dir / "report.json",
                    {"config": _config_echo(cfg), "history": exc.history,
                     "error": str(exc)})
        record["outputs"].append(str(out_dir / "report.json"))
        raise

    ckpt = out_dir / "model.ckpt"
    save_checkpoint(result.state, ckpt)
    assignment_path = out_dir / "assignment.tsv"
    with open(assignment_path, "w", encoding="utf-8") as fh:
        for i, c in enumerate(result.assignment.labels):
            fh.write(f"{g.node_ids[i]}\t{c}\n")
    final = _final_metrics(g, result.assignment)
    final["q_tilde"] = result.history[-1]["q_tilde"] if result.history else None
    report = {
        "config": _config_echo(cfg),
        "history": result.history,
        "final": final,
        "metapaths": result.provenance,
        "warnings": result.warnings,
    }
    report_path = _write_json(out_dir / "report.json", report)
    record["outputs"] += [str(ckpt), str(assignment_path), str(report_path)]
    label = f"[{tag}] " if tag else ""
    print(f"{label}trained {cfg.epochs} epochs; final " +
          ", ".join(f"{k}={v:.4f}" for k, v in sorted(final.items()) if v is not None))
    return final


def _cmd_train(args, record):
    data_dir = Path(args.data)
    g = load_dataset_dir(data_dir, drop_self_loops=args.drop_self_loops)
    cfg = _train_config(args)
    record["config"] = _config_echo(cfg)
    record["inputs"] = _dataset_inputs(data_dir)
    _run_training(g, cfg, Path(args.out), record)
    return EXIT_OK


def _cmd_ablate(args, record):
    data_dir = Path(args.data)
    g = load_dataset_dir(data_dir, drop_self_loops=args.drop_self_loops)
    record["inputs"] = _dataset_inputs(data_dir)
    out_root = Path(args.out)
    summary = {}
    for mode in ("full", "a2m", "cmf"):
        cfg = dataclasses.replace(_train_config(args), loss_mode=mode)
        summary[mode] = _run_training(g, cfg, out_root / mode, record, tag=mode)
    record["config"] = _config_echo(_train_config(args))
    path = _write_json(out_root / "ablation.json", summary)
    record["outputs"].append(str(path))
    return EXIT_OK


def _read_assignment(path: Path) -> dict[str, str]:
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split("\t")
            if len(parts) == 1:
                parts = line.split()
            if len(parts) != 2:
                raise GraphFormatError(f"{path}:{lineno}: expected 'node<TAB>community'")
            if parts[0] in out:
                raise GraphValidationError(f"{path}:{lineno}: duplicate node {parts[0]}")
            out[parts[0]] = parts[1]
    return out


def _cmd_evaluate(args, record):
    data_dir = Path(args.data)
    g = load_dataset_dir(data_dir)
    raw = _read_assignment(Path(args.assignment))
    if set(raw) != set(g.node_ids):
        raise GraphValidationError(
            f"assignment covers {len(raw)} nodes, dataset has {g.n_nodes}")
    values = [raw[nid] for nid in g.node_ids]
    _, pred = np.unique(values, return_inverse=True)
    assignment = obj.CommunityAssignment.from_labels(pred)
    scores = {"modularity": obj.classic_modularity(g, assignment)}
    if g.labels is not None:
        scores.update(met.all_metrics(pred, g.labels, f1_average=args.f1))
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    json_path = _write_json(out_dir / "metrics.json", scores)
    csv_path = out_dir / "metrics.csv"
    keys = sorted(scores)
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write(",".join(keys) + "\n")
        fh.write(",".join(f"{scores[k]:.10g}" for k in keys) + "\n")
    record["inputs"] = {str(args.assignment): _sha256(Path(args.assignment)),
                        **_dataset_inputs(data_dir)}
    record["outputs"] = [str(json_path), str(csv_path)]
    print(", ".join(f"{k}={scores[k]:.4f}" for k in keys))
    return EXIT_OK


def _cmd_gradcheck(args, record):
    if args.epsilon <= 0:
        raise ConfigError("epsilon must be positive")
    blocks = [args.nodes // 2, args.nodes - args.nodes // 2]
    sig = max(1, args.attrs // 4)
    g = generate_sbm(SbmConfig(blocks=blocks, p_in=0.6, p_out=0.15, n_attrs=args.attrs,
                               signature_size=sig, p_sig=0.9, p_noise=0.2, seed=args.seed))
    cfg = TrainConfig(epochs=1, dim=args.dim, layers=args.layers, top_k=args.topk,
                      pair_budget=args.pair_budget, seed=args.seed,
                      paper_literal_eq3=args.paper_literal_eq3)
    report = run_gradcheck(g, cfg, epsilon=args.epsilon)
    passed = report.max_rel_err < args.tolerance
    payload = {
        "max_rel_err": report.max_rel_err,
        "worst_param": report.worst_param,
        "tolerance": args.tolerance,
        "passed": bool(passed),
        "per_param": {k: v for k, v in sorted(report.per_param.items())},
    }
    print(json.dumps(payload, indent=2, sort_keys=True))
    if args.out:
        path = _write_json(Path(args.out) / "gradcheck.json", payload)
        record["outputs"].append(str(path))
    record["config"] = {"nodes": args.nodes, "attrs": args.attrs, "dim": args.dim,
                        "epsilon": args.epsilon, "tolerance": args.tolerance,
                        "seed": args.seed}
    return EXIT_OK if passed else 1


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------

def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int, default=400)
    p.add_argument("--dim", type=int, default=32, help="embedding width")
    p.add_argument("--lr", type=float, default=0.01, help="learning rate")
    p.add_argument("--weight-decay", type=float, default=0.2)
    p.add_argument("--lambda", dest="lam", type=float, default=0.1,
                   help="weight of the attribute-cohesiveness loss")
    p.add_argument("--r1", type=float, default=1.0)
    p.add_argument("--r2", type=float, default=1.0)
    p.add_argument("--layers", type=int, default=2, help="convolution layers / meta-paths")
    p.add_argument("--topk", type=int, default=10, help="neighbors kept per row")
    p.add_argument("--order", type=int, default=2, help="proximity order for modularity")
    p.add_argument("--decay", type=float, default=0.5, help="decay per proximity order")
    p.add_argument("--pair-budget", type=int, default=4096)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--loss", choices=("full", "a2m", "cmf"), default="full")
    p.add_argument("--init", choices=("labels", "kmeans", "random"), default="labels")
    p.add_argument("--k", type=int, default=None, help="community count when unlabeled")
    p.add_argument("--heads", type=int, default=1, help="reserved; must be 1")
    p.add_argument("--binary-lift", action="store_true",
                   help="ignore feature values when lifting; all EA weights 1")
    p.add_argument("--paper-literal-eq3", action="store_true",
                   help="use the literal attention normalizer variant")
    p.add_argument("--inter-on-cut-edges", action="store_true",
                   help="sample cross-community pairs from cut edges only")
    p.add_argument("--drop-self-loops", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hacd",
                                     description="Attributed community detection pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a planted-partition dataset")
    p.add_argument("--blocks", required=True, help="comma-separated block sizes")
    p.add_argument("--p-in", type=float, required=True)
    p.add_argument("--p-out", type=float, required=True)
    p.add_argument("--n-attrs", type=int, default=20)
    p.add_argument("--signature-size", type=int, default=5)
    p.add_argument("--p-sig", type=float, default=0.8)
    p.add_argument("--p-noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_synth)

    p = sub.add_parser("ingest", help="validate and canonicalize dataset files")
    p.add_argument("--edges", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--labels", default=None)
    p.add_argument("--drop-self-loops", action="store_true")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_ingest)

    p = sub.add_parser("train", help="train and emit report/checkpoint/assignment")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("-o", "--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("ablate", help="train under full/a2m/cmf losses and compare")
    p.add_argument("--data", required=True)
    p.add_argument("-o", "--out", required=True)
    _add_train_flags(p)
    p.set_defaults(func=_cmd_ablate)

    p = sub.add_parser("evaluate", help="score an assignment against a dataset")
    p.add_argument("--assignment", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--f1", choices=("macro", "weighted"), default="macro")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=_cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full loss")
    p.add_argument("--nodes", type=int, default=12, help="fixture size (<= 15)")
    p.add_argument("--attrs", type=int, default=8)
    p.add_argument("--dim", type=int, default=8)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--topk", type=int, default=4)
    p.add_argument("--pair-budget", type=int, default=64)
    p.add_argument("--epsilon", type=float, default=1e-4,
                   help="finite-difference probe step; smaller steps drown "
                        "low-magnitude gradients in float64 roundoff")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--paper-literal-eq3", action="store_true")
    p.add_argument("-o", "--out", default=None)
    p.set_defaults(func=_cmd_gradcheck)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    record = {"command": args.command, "argv": list(argv) if argv is not None else sys.argv[1:],
              "config": {}, "inputs": {}, "outputs": []}
    start = time.time()
    try:
        status = args.func(args, record)
    except (ConfigError, GraphFormatError, GraphValidationError, ValueError,
            FileNotFoundError, NotADirectoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        status = EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"numerical failure: {exc} (last good checkpoint retained)", file=sys.stderr)
        status = EXIT_NUMERICAL
    record["duration_s"] = round(time.time() - start, 3)
    record["exit_status"] = status
    record["written_at"] = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    out = getattr(args, "out", None)
    if out is not None:
        try:
            _write_json(Path(out) / "manifest.json", record)
        except OSError as exc:
            print(f"warning: could not write manifest: {exc}", file=sys.stderr)
    return status


if __name__ == "__main__":
    sys.exit(main())
