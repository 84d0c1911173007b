"""``dd`` command line. Exit status: 0 ok, 1 invalid input, 2 numerical failure."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import encoder as enc
from .baseline import build_graph, solve_closed_form, solve_iterative
from .datasets import Dataset, SpiralShape, gen_spiral, gen_uniform, load_csv, write_csv
from .evaluation import _order, per_query_ap, write_map_report
from .extraction import extract
from .manifold import load_manifold, save_manifold
from .toy import ToyConfig, summarize, toy_repro
from .trainer import TrainConfig, train, write_snapshot

log = logging.getLogger("ddrank")

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _gen_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--n", type=int, default=1000)
    p.add_argument("--arms", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jitter", type=float, default=0.01)


def _dataset(source: str, args) -> Dataset:
    if source == "spiral":
        return gen_spiral(args.n, args.arms, args.seed, args.jitter)
    if source == "uniform":
        return gen_uniform(args.n, args.seed)
    return load_csv(source)


def cmd_gen(args) -> None:
    write_csv(_dataset(args.kind, args), args.out)


def cmd_train(args) -> None:
    data = _dataset(args.data, args)
    cfg = TrainConfig.load(args.config) if args.config else TrainConfig()
    if args.set:
        # later lines win in from_text
        cfg = TrainConfig.from_text(cfg.to_text() + "\n".join(args.set), "--set")
    cfg.validate(len(data))
    model = (
        enc.load_checkpoint(args.init)
        if args.init
        else enc.init_he(cfg.layer_dims(data.dim), cfg.seed, cfg.normalize_output)
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model, manifold, report = train(data, model, cfg, eval_set=data if data.has_labels else None, out_dir=out)
    enc.save_checkpoint(model, out / "encoder.ckpt")
    save_manifold(manifold, out / "manifold.txt")
    report.save(out / "report.json")
    (out / "config.txt").write_text(cfg.to_text())
    if report.evals:
        print(f"best MAP {report.best_map:.2f} at epoch {report.best_epoch}")


def cmd_pretrain(args) -> None:
    pts = gen_uniform(args.n, args.seed).x
    hidden = [int(h) for h in args.hidden.split(",") if h]
    model = enc.init_he([2, *hidden, 2], args.seed)
    model, err = enc.pretrain_identity(model, pts, args.epochs, args.lr, args.seed, threshold=args.threshold)
    enc.save_checkpoint(model, args.out)
    print(f"identity MSE {err:.3g}")


def cmd_extract(args) -> None:
    data = load_csv(args.data)
    model = enc.load_checkpoint(args.encoder)
    state = load_manifold(args.manifold) if args.manifold else None
    feats = extract(args.mode, model, data.x, state, args.k, args.r_steps)
    write_csv(Dataset(data.ids, feats, list(data.labels)), args.out, value_prefix="f")


def _write_ranking(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["query_id", "rank", "id", "score"])
        w.writerows(rows)


def _queries(data: Dataset, query) -> list[int]:
    if query is None:
        return list(range(len(data)))
    pos = {int(i): r for r, i in enumerate(data.ids)}
    if query not in pos:
        raise ValueError(f"query id {query} not in the feature file")
    return [pos[query]]


def cmd_rank(args) -> None:
    data = load_csv(args.features)
    rows = []
    for qi in _queries(data, args.query):
        dist = np.sqrt(((data.x - data.x[qi]) ** 2).sum(1))
        order = _order(dist, data.ids)
        order = order[order != qi][: args.top or None]
        rows += [(int(data.ids[qi]), r + 1, int(data.ids[j]), format(dist[j], ".17g")) for r, j in enumerate(order)]
    _write_ranking(args.out, rows)


def cmd_eval(args) -> None:
    data = load_csv(args.features)
    if not data.has_labels:
        raise ValueError(f"{args.features}: every sample needs a label for evaluation")
    aps = per_query_ap(data.x, data.labels, data.ids)
    write_map_report(args.out, data.ids, aps)
    print(f"MAP {100 * aps.mean():.2f}")


def cmd_baseline(args) -> None:
    data = load_csv(args.data)
    g = build_graph(data.x, args.sigma, args.alpha)
    rows, aps = [], []
    # scores are positional: source_id is the 1-based row
    for qi in _queries(data, args.query):
        if args.solver == "closed":
            r = solve_closed_form(g, qi + 1)
        else:
            r, _ = solve_iterative(g, qi + 1, tol=args.tol)
        order = _order(-r, data.ids)
        order = order[order != qi]
        rows += [(int(data.ids[qi]), k + 1, int(data.ids[j]), format(r[j], ".17g")) for k, j in enumerate(order)]
        if data.has_labels:
            rel = np.array([data.labels[j] == data.labels[qi] for j in order])
            if rel.any():
                aps.append(float((np.cumsum(rel)[rel] / (np.flatnonzero(rel) + 1)).sum() / rel.sum()))
    _write_ranking(args.out, rows)
    print(f"sigma {g.sigma:.6g} alpha {g.alpha:g}")
    if aps:
        print(f"MAP {100 * np.mean(aps):.2f}")


def cmd_toy(args) -> None:
    cfg = ToyConfig(seed=args.seed, lam=args.lam, epochs=args.epochs)
    if args.ks:
        cfg.ks = tuple(int(k) for k in args.ks.split(","))
    cfg.snapshot_epochs = tuple(e for e in cfg.snapshot_epochs if e <= cfg.epochs)
    runs = toy_repro(cfg, args.out, reuse=not args.fresh)
    print(summarize(runs))
    Path(args.out, f"summary_lam{cfg.lam:g}.json").write_text(
        json.dumps([{"k": r.k, "lam": r.lam, "initial_map": r.initial_map, "final_map": r.final_map,
                     "initial_diameter": r.initial_diameter, "final_diameter": r.final_diameter}
                    for r in runs], indent=1)
    )


def cmd_snapshot(args) -> None:
    data = _dataset(args.data, args)
    model = enc.load_checkpoint(args.encoder)
    if model.out_dim != 2:
        raise ValueError(f"latent dimension is {model.out_dim}; snapshots need P=2 (use `dd extract --mode e` for CSV)")
    write_snapshot(model, data, args.out)


def render_svg(data: Dataset, size: int = 480, margin: int = 20) -> str:
    if data.dim != 2:
        raise ValueError(f"plot needs 2 feature columns, found {data.dim}")
    lo, hi = data.x.min(0), data.x.max(0)
    span = float(max(hi - lo)) or 1.0
    scale = (size - 2 * margin) / span
    colors = {lab: PALETTE[i % len(PALETTE)] for i, lab in enumerate(sorted({str(l) for l in data.labels}))}
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
           f'<rect width="{size}" height="{size}" fill="white"/>']
    for (x, y), lab in zip(data.x, data.labels):
        cx = margin + (x - lo[0]) * scale
        cy = size - margin - (y - lo[1]) * scale
        out.append(f'<circle cx="{cx:.2f}" cy="{cy:.2f}" r="2" fill="{colors[str(lab)]}"/>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def cmd_plot(args) -> None:
    Path(args.out).write_text(render_svg(load_csv(getattr(args, "in"))))


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="dd", description="Deep diffusion representation learning and retrieval.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="cmd", required=True)

    p = sub.add_parser("gen", help="write a synthetic dataset as CSV")
    p.add_argument("kind", choices=("spiral", "uniform"))
    p.add_argument("--out", required=True)
    _gen_flags(p)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="jointly train encoder and manifold")
    p.add_argument("--data", required=True, help="CSV path, 'spiral' or 'uniform'")
    p.add_argument("--config")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    p.add_argument("--init", help="start from this encoder checkpoint")
    p.add_argument("--out", required=True)
    _gen_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pretrain", help="identity-pretrain a 2-D encoder on uniform points")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--hidden", default="1000,1000")
    p.add_argument("--epochs", type=int, default=1000)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--threshold", type=float, default=1e-3)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("extract", help="DD(E), DD(D) or DD(E+D) features")
    p.add_argument("--mode", choices=("e", "d", "ed"), required=True)
    p.add_argument("--encoder", required=True)
    p.add_argument("--manifold")
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=20)
    p.add_argument("--r-steps", type=int, default=20)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("rank", help="Euclidean retrieval ranking")
    p.add_argument("--features", required=True)
    p.add_argument("--query", type=int, help="query id (default: every sample)")
    p.add_argument("--top", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="MAP over all queries; writes map_report.csv")
    p.add_argument("--features", required=True)
    p.add_argument("--out", default="map_report.csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("baseline", help="classical manifold ranking")
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=0.99)
    p.add_argument("--sigma", type=float, help="Gaussian bandwidth (default: median pairwise distance)")
    p.add_argument("--solver", choices=("closed", "iterative"), default="closed")
    p.add_argument("--tol", type=float, default=1e-10)
    p.add_argument("--query", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("toy-repro", help="three-arm spiral experiment")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ks", help="comma-separated k values (default 5,20,200)")
    p.add_argument("--lam", type=float, default=1.0)
    p.add_argument("--epochs", type=int, default=6000)
    p.add_argument("--out", default="results/toy")
    p.add_argument("--fresh", action="store_true", help="ignore cached runs")
    p.set_defaults(func=cmd_toy)

    p = sub.add_parser("snapshot", help="id,label,z1,z2 CSV of a 2-D encoder's outputs")
    p.add_argument("--encoder", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    _gen_flags(p)
    p.set_defaults(func=cmd_snapshot)

    p = sub.add_parser("plot", help="SVG scatter of a 2-D snapshot CSV")
    p.add_argument("--in", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plot)
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except ArithmeticError as exc:
        print(f"dd: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ValueError, OSError) as exc:
        print(f"dd: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
