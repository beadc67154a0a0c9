"""Command-line interface: ``primalfix {graph, estimate, simulate, oracle}``.

Exit codes: 0 on success; 1 when the graph is not primal fixable (``graph``), TMLE
did not converge (``estimate``, report still written) or a positivity violation
occurs (``oracle``); 2 for unreadable or inconsistent input.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .data import BASES, ColumnKind, DataError, Dataset, load_csv
from .estimators import ESTIMATORS, EstimationError, ace, estimate
from .graph import (
    Admg,
    Dag,
    GraphError,
    districts,
    fixability_conflicts,
    graph_from_dict,
    latent_project,
    mb_shielded,
    partition_mlx,
    topological_order,
    validate,
)
from .learners import BasisLearner, FitError
from .nuisance import STRATEGIES, NuisanceConfig, NuisanceError
from .oracle import OracleError, brute_force_psi, load_joint_table
from .simulation import SimulationError, default_threads, load_experiment_config, run_experiment

EXIT_OK, EXIT_FAIL, EXIT_INPUT = 0, 1, 2


class InputError(Exception):
    """Bad command-line input; reported with exit code 2."""


def _read_graph(path: str) -> tuple[Admg, dict]:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise InputError(f"cannot read graph file {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"graph file {path} is not valid JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise InputError("graph file must hold a JSON object")
    try:
        g = graph_from_dict(raw)
    except GraphError as exc:
        raise InputError(str(exc)) from exc
    if isinstance(g, Dag):
        g = latent_project(g)
    return g, raw


def _query(args, raw: dict, g: Admg) -> tuple[str, str]:
    treatment = args.treatment or raw.get("treatment") or ("A" if "A" in g.names else None)
    outcome = args.outcome or raw.get("outcome") or ("Y" if "Y" in g.names else None)
    if treatment is None or outcome is None:
        raise InputError("name the treatment and outcome with --treatment and --outcome")
    for v in (treatment, outcome):
        if v not in g.names:
            raise InputError(f"vertex {v!r} is not in the graph")
    return treatment, outcome


def _fmt_set(vs) -> str:
    return "{" + ", ".join(vs) + "}"


# ---------------------------------------------------------------- graph


def cmd_graph(args) -> int:
    g, raw = _read_graph(args.graph)
    problems = validate(g)
    if problems:
        raise InputError("; ".join(problems))
    treatment, outcome = _query(args, raw, g)
    try:
        order = topological_order(g, treatment, outcome)
    except GraphError as exc:
        raise InputError(str(exc)) from exc
    dis = sorted(sorted(d, key=order.index) for d in districts(g))
    print("districts: " + ", ".join(_fmt_set(d) for d in dis))
    print("topological order: " + ", ".join(order))
    conflicts = fixability_conflicts(g, treatment)
    if conflicts:
        print(f"primal fixable: no (children of {treatment} in its district: {_fmt_set(sorted(conflicts))})")
    else:
        print("primal fixable: yes")
        p = partition_mlx(g, order, treatment, outcome)
        ordered = lambda s: [v for v in order if v in s]  # noqa: E731
        print(f"X = {_fmt_set(ordered(p.pre))}")
        print(f"L = {_fmt_set(ordered(p.district_post))}; M = {_fmt_set(ordered(p.outside_post))}")
        print("labels: " + ", ".join(f"{v}={p.labels[v]}" for v in order if v in p.labels))
    print(f"mb-shielded: {'yes' if mb_shielded(g) else 'no'}")
    return EXIT_FAIL if conflicts else EXIT_OK


# ---------------------------------------------------------------- estimate


def _binding(g: Admg, header: Sequence[str], binds: Sequence[str]) -> dict[str, tuple[str, ...]]:
    """Vertex-to-column binding: explicit ``--bind V=c1,c2`` entries, else by name.

    A vertex of arity 1 defaults to the column with its own name; a vertex of arity k
    defaults to columns ``V1 .. Vk``.
    """
    explicit = {}
    for item in binds:
        if "=" not in item:
            raise InputError(f"--bind expects VERTEX=col1,col2, got {item!r}")
        v, cols = item.split("=", 1)
        explicit[v.strip()] = tuple(c.strip() for c in cols.split(",") if c.strip())
    out = {}
    for vertex in g.vertices:
        if vertex.name in explicit:
            out[vertex.name] = explicit[vertex.name]
        elif vertex.arity == 1 and vertex.name in header:
            out[vertex.name] = (vertex.name,)
        elif vertex.arity > 1:
            out[vertex.name] = tuple(f"{vertex.name}{i + 1}" for i in range(vertex.arity))
        else:
            out[vertex.name] = (vertex.name,)
    unknown = set(explicit) - set(g.names)
    if unknown:
        raise InputError(f"--bind names vertices not in the graph: {sorted(unknown)}")
    return out


def _csv_header(path: str) -> list[str]:
    try:
        with open(path, encoding="utf-8") as fh:
            return [h.strip() for h in fh.readline().strip().split(",")]
    except OSError as exc:
        raise InputError(f"cannot read data file {path}: {exc}") from exc


def cmd_estimate(args) -> int:
    g, raw = _read_graph(args.graph)
    treatment, outcome = _query(args, raw, g)
    binding = _binding(g, _csv_header(args.data), args.bind or ())
    kinds = {binding[treatment][0]: ColumnKind.BINARY}
    for v in args.binary or ():
        if v not in binding:
            raise InputError(f"--binary names an unknown vertex {v!r}")
        for c in binding[v]:
            kinds[c] = ColumnKind.BINARY
    try:
        ds = load_csv(args.data, binding, kinds)
    except DataError as exc:
        raise InputError(str(exc)) from exc
    # a 0/1 outcome column is treated as binary so TMLE keeps estimates in [0, 1]
    y_col = binding[outcome]
    if len(y_col) == 1 and y_col[0] not in kinds:
        values = ds.columns[y_col[0]]
        if ((values == 0) | (values == 1)).all():
            ds = Dataset(ds.columns, ds.binding, {**ds.kinds, y_col[0]: ColumnKind.BINARY})
    config = NuisanceConfig(learner=BasisLearner(args.basis, args.degree), seed=args.seed)
    levels = (1, 0) if args.ace else (args.a0,)
    reports = {}
    for a0 in levels:
        try:
            reports[a0] = estimate(
                ds, g, treatment, outcome, a0=a0, estimator=args.estimator, strategy=args.strategy,
                config=config, crossfit=args.crossfit, seed=args.seed,
            )
        except (EstimationError, NuisanceError, GraphError, DataError, FitError) as exc:
            raise InputError(str(exc)) from exc
    payload = {f"a0={a0}": r.to_dict() for a0, r in reports.items()}
    if args.ace:
        payload["ace"] = ace(reports[1], reports[0]).to_dict()
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    for key, r in payload.items():
        se = "NA" if r["se"] is None else f"{r['se']:.6g}"
        line = f"{key}: psi={r['psi']:.6g} se={se} [{args.estimator}/{args.strategy}]"
        if r.get("converged") is not None:
            line += f" converged={str(r['converged']).lower()}"
        print(line)
    not_converged = any(r.converged is False for r in reports.values())
    return EXIT_FAIL if not_converged else EXIT_OK


# ---------------------------------------------------------------- simulate


def cmd_simulate(args) -> int:
    threads = args.threads if args.threads is not None else default_threads()
    overrides = {
        "replications": args.replications,
        "n": tuple(args.n) if args.n else None,
        "seed": args.seed,
        "threads": threads,
        "a0": args.a0,
    }
    try:
        cfg = load_experiment_config(args.config, **overrides)
        result = run_experiment(cfg)
    except (SimulationError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    out = Path(args.out) if args.out else None
    if out is not None:
        if out.suffix == ".json":
            out.write_text(result.to_json() + "\n", encoding="utf-8")
        else:
            out.write_text(result.to_csv(), encoding="utf-8")
            out.with_suffix(".json").write_text(result.to_json() + "\n", encoding="utf-8")
    print(f"truth={result.truth:.6g} dgp={cfg.dgp} a0={cfg.a0} R={cfg.replications}")
    for r in result.rows:
        if r.mean is None:
            print(f"{r.label:28s} n={r.n:<6d} all {r.failures} replications failed")
            continue
        sd = "NA" if r.sd is None else f"{r.sd:.4f}"
        cov = "NA" if r.coverage is None else f"{r.coverage:.3f}"
        print(
            f"{r.label:28s} n={r.n:<6d} bias={r.bias:+.4f} sd={sd} mse={r.mse:.4f} "
            f"coverage={cov} failures={r.failures}"
        )
    for d in result.diagnostics:
        print(f"note: {d}")
    return EXIT_OK


# ---------------------------------------------------------------- oracle


def cmd_oracle(args) -> int:
    g, raw = _read_graph(args.graph)
    treatment, outcome = _query(args, raw, g)
    try:
        table = load_joint_table(args.table)
    except OracleError as exc:
        raise InputError(str(exc)) from exc
    missing = set(g.names) - set(table.names)
    if missing:
        raise InputError(f"joint table lacks vertices {sorted(missing)}")
    try:
        p = partition_mlx(g, topological_order(g, treatment, outcome), treatment, outcome)
    except GraphError as exc:
        raise InputError(str(exc)) from exc
    try:
        psi = brute_force_psi(table, p, args.a0)
    except OracleError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FAIL
    print(f"psi={psi!r}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="primalfix", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def query_flags(p):
        p.add_argument("--graph", required=True, help="graph JSON file")
        p.add_argument("--treatment", help="treatment vertex (default: graph file or 'A')")
        p.add_argument("--outcome", help="outcome vertex (default: graph file or 'Y')")

    p = sub.add_parser("graph", help="print districts, order, fixability and the partition")
    query_flags(p)
    p.set_defaults(func=cmd_graph)

    p = sub.add_parser("estimate", help="estimate E[Y(a0)] or the ACE from a CSV file")
    query_flags(p)
    p.add_argument("--data", required=True, help="CSV file with a header row")
    p.add_argument("--bind", action="append", metavar="V=c1,c2", help="bind a vertex to columns")
    p.add_argument("--binary", action="append", metavar="V", help="declare a vertex binary")
    p.add_argument("--a0", type=int, choices=(0, 1), default=1)
    p.add_argument("--ace", action="store_true", help="estimate both levels and their difference")
    p.add_argument("--estimator", choices=ESTIMATORS, default="tmle")
    p.add_argument("--strategy", choices=STRATEGIES, default="bayes")
    p.add_argument("--basis", choices=BASES, default="main_terms")
    p.add_argument("--degree", type=int, default=2, help="degree of the polynomial basis")
    p.add_argument("--crossfit", type=int, metavar="K", help="number of cross-fitting folds")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report JSON path")
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="run a replication study from an experiment JSON file")
    p.add_argument("--config", required=True, help="experiment JSON file")
    p.add_argument("--replications", type=int)
    p.add_argument("--n", type=int, nargs="+", help="sample sizes")
    p.add_argument("--a0", type=int, choices=(0, 1))
    p.add_argument("--seed", type=int)
    p.add_argument("--threads", type=int, help="worker processes (default: PF_THREADS or 1)")
    p.add_argument("--out", help="metrics CSV path (a JSON copy is written alongside) or .json path")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("oracle", help="evaluate the identifying formula on a discrete joint table")
    query_flags(p)
    p.add_argument("--table", required=True, help="CSV with one column per vertex and a 'prob' column")
    p.add_argument("--a0", type=int, choices=(0, 1), default=1)
    p.set_defaults(func=cmd_oracle)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
