"""Command-line front end.

Exit codes: 0 success, 2 usage or configuration error, 3 fit stopped at
the iteration cap without converging, 4 bad input data.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys

import numpy as np

from . import evaluation, io
from .core import FittedModel
from .generative import ConfigError, DegenerateNodeError, generate_dataset
from .inference import FitConfig, fit, fold_in_theta_from_attributes, fold_in_theta_from_links

EXIT_OK, EXIT_USAGE, EXIT_NOT_CONVERGED, EXIT_DATA = 0, 2, 3, 4
DEFAULT_K_GRID = "5:25:5"

log = logging.getLogger("clsm")


class UsageError(Exception):
    pass


def parse_k_grid(text: str) -> tuple:
    """``"start:stop:step"`` (inclusive) or a comma-separated list."""
    try:
        if ":" in text:
            start, stop, step = (int(x) for x in text.split(":"))
            if step < 1 or start < 1 or stop < start:
                raise ValueError
            return tuple(range(start, stop + 1, step))
        values = tuple(int(x) for x in text.split(","))
        if not values or min(values) < 1:
            raise ValueError
        return values
    except ValueError:
        raise UsageError(f"bad K grid {text!r}; use start:stop:step or a comma list") from None


def parse_sizes(text: str) -> list:
    try:
        sizes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"bad size list {text!r}") from None
    if len(sizes) < 2:
        raise UsageError("--sizes needs at least two values")
    if min(sizes) < 2:
        raise UsageError("sizes must be >= 2")
    return sizes


def resolve_threads(flag) -> int:
    if flag is not None:
        return flag
    env = os.environ.get("CLSM_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise UsageError(f"CLSM_THREADS must be an integer, got {env!r}") from None
    return 1


def _apply_threads(n: int) -> None:
    import numba

    # the default layer probe warns about old TBB builds; workqueue always exists
    numba.config.THREADING_LAYER = "workqueue"
    numba.set_num_threads(max(1, min(n, numba.config.NUMBA_NUM_THREADS)))


def _fit_config(args, **defaults) -> FitConfig:
    overrides = dict(num_topics=getattr(args, "num_topics", None),
                     max_iterations=getattr(args, "max_iters", None),
                     rel_tol=getattr(args, "rel_tol", None), seed=args.seed)
    values = io.read_key_values(args.config) if getattr(args, "config", None) else {}
    for key, val in defaults.items():
        if key not in values and overrides.get(key) is None:
            overrides[key] = val
    if "num_topics" not in values and overrides["num_topics"] is None:
        raise UsageError("the number of topics is required (--num-topics or config)")
    return io.fit_config_from_dict(values, **overrides)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = io.load_sim_config(args.config, seed=args.seed)
    graph, behaviors, truth = generate_dataset(cfg)
    prefix = args.out_prefix
    io.save_edge_list(graph, f"{prefix}.edges.tsv")
    io.save_behaviors(behaviors, f"{prefix}.behaviors.tsv")
    io.save_checkpoint(FittedModel(theta_hat=truth.theta_true, beta_hat=truth.beta_true,
                                   omega_hat=truth.omega_true, hyper=cfg.hyper),
                       f"{prefix}.truth.ckpt")
    print(f"N={graph.num_nodes} |E|={graph.num_edges} sum_M={int(behaviors.totals.sum())}")
    return EXIT_OK


def cmd_fit(args) -> int:
    data = io.load_dataset(args.edges, args.behaviors, args.vocab_size)
    cfg = _fit_config(args)
    model, report, _ = fit(data.graph, data.behaviors, cfg)
    io.save_checkpoint(model, args.out)
    tail = ", ".join(f"{v:.6f}" for v in report.elbo_trace[-5:])
    print(f"elbo tail: {tail}")
    status = "converged" if report.converged else "not converged"
    print(f"{status} after {report.iterations} iterations")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def _write_rankings(path, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["query", "rank", "candidate", "score"])
        for q, rank, cand, score in rows:
            writer.writerow([q, rank, cand, io.format_value(score)])


def _ranked(query, scores, top):
    order = np.argsort(-scores, kind="stable")
    if top:
        order = order[:top]
    return [(query, r + 1, int(c), float(scores[c])) for r, c in enumerate(order)]


def cmd_predict_links(args) -> int:
    model = io.load_checkpoint(args.checkpoint)
    V = model.omega_hat.shape[1]
    queries = io.load_behaviors(args.query, vocab_size_hint=V)
    rows = []
    for q in range(queries.num_nodes):
        toks = queries.token_list(q)
        if toks.size == 0:
            continue
        theta = fold_in_theta_from_attributes(model, toks)
        scores = evaluation.predict_link_probs(theta, model.theta_hat, model.beta_hat,
                                               model.hyper.epsilon)
        rows += _ranked(q, scores, args.top)
    _write_rankings(args.out_csv, rows)
    return EXIT_OK


def cmd_predict_attrs(args) -> int:
    model = io.load_checkpoint(args.checkpoint)
    links = io.load_link_queries(args.query, model.theta_hat.shape[0])
    rows = []
    for q, nbrs in links.items():
        theta = fold_in_theta_from_links(model, nbrs)
        rows += _ranked(q, evaluation.predict_attribute_dist(theta, model.omega_hat), args.top)
    _write_rankings(args.out_csv, rows)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    grid = parse_k_grid(args.k_grid)
    data = io.load_dataset(args.edges, args.behaviors, args.vocab_size)
    if args.task == "attrs" and data.behaviors.totals.sum() == 0:
        raise UsageError("attribute prediction needs behavior data")
    if args.task == "links" and data.graph.num_edges == 0:
        raise UsageError("link prediction needs at least one link")
    cfg = _fit_config(args, num_topics=grid[0])
    harness = (evaluation.run_link_prediction_cv if args.task == "links"
               else evaluation.run_attribute_prediction_cv)
    rows, skipped = harness(data.graph, data.behaviors, cfg, folds=args.folds,
                            repeats=args.repeats, k_grid=grid, dataset=args.dataset,
                            seed=args.seed)
    io.write_metrics_csv(rows, args.out_csv)
    for (task, K), metrics in sorted(evaluation.summarize(rows).items()):
        print(f"K={K} auc={metrics.get('auc', float('nan')):.4f} "
              f"avg_rank={metrics.get('avg_rank', float('nan')):.2f}")
    if skipped:
        print(f"skipped {skipped} test nodes without held-out positives")
    return EXIT_OK


def cmd_bench_scaling(args) -> int:
    sizes = parse_sizes(args.sizes)
    rows = evaluation.run_scaling_benchmark(sizes, args.avg_degree, args.vocab_size,
                                            args.num_topics, args.sweeps, args.seed)
    with open(args.out_csv, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "seconds_per_sweep"])
        for n, sec in rows:
            writer.writerow([n, io.format_value(sec)])
    for (n0, t0), (n1, t1) in zip(rows, rows[1:]):
        print(f"N {n0} -> {n1}: per-sweep time ratio {t1 / t0:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def _add_fit_flags(p) -> None:
    p.add_argument("--config", help="key=value fit configuration file")
    p.add_argument("--num-topics", type=int)
    p.add_argument("--max-iters", type=int)
    p.add_argument("--rel-tol", type=float)
    p.add_argument("--vocab-size", type=int, help="vocabulary size if larger than the data shows")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clsm", description=__doc__.splitlines()[0])
    parser.add_argument("--threads", type=int, help="worker threads (default: $CLSM_THREADS or 1)")
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="sample a synthetic dataset")
    p.add_argument("--config", required=True)
    p.add_argument("--out-prefix", required=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="fit the model and write a checkpoint")
    p.add_argument("--edges", required=True)
    p.add_argument("--behaviors", required=True)
    p.add_argument("--out", required=True)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_fit)

    for name, func, query_help in (
            ("predict-links", cmd_predict_links, "behavior TSV of the query nodes"),
            ("predict-attrs", cmd_predict_attrs, "TSV of 'query<TAB>fitted node' links")):
        p = sub.add_parser(name, help=f"rank candidates for new nodes ({name[8:]})")
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--query", required=True, help=query_help)
        p.add_argument("--out-csv", required=True)
        p.add_argument("--top", type=int, default=0, help="keep the best N per query (0 = all)")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", help="cross-validated link or attribute prediction")
    p.add_argument("--edges", required=True)
    p.add_argument("--behaviors", required=True)
    p.add_argument("--task", choices=("links", "attrs"), required=True)
    p.add_argument("--k-grid", default=DEFAULT_K_GRID)
    p.add_argument("--folds", type=int, default=evaluation.DEFAULT_FOLDS)
    p.add_argument("--repeats", type=int, default=evaluation.DEFAULT_REPEATS)
    p.add_argument("--dataset", default="data")
    p.add_argument("--out-csv", required=True)
    _add_fit_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("bench-scaling", help="per-sweep time at several network sizes")
    p.add_argument("--sizes", required=True, help="comma list, e.g. 1000,2000,4000")
    p.add_argument("--avg-degree", type=float, default=10.0)
    p.add_argument("--vocab-size", type=int, default=200)
    p.add_argument("--num-topics", type=int, default=5)
    p.add_argument("--sweeps", type=int, default=10)
    p.add_argument("--out-csv", required=True)
    p.set_defaults(func=cmd_bench_scaling)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _apply_threads(resolve_threads(args.threads))
        return args.func(args)
    except (UsageError, io.ConfigFileError, io.DimensionMismatchError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (io.DataError, DegenerateNodeError, io.CheckpointFormatError,
            io.CorruptCheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
