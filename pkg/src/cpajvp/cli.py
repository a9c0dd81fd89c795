"""Command line front end.

Subcommands: jvp, vjp, jvp-weight, affine, eigen, svd, frobnorm, trace,
bench, gen. Exit codes: 0 on success, 1 for usage errors, 2 for data or
computation errors (bad files, shape mismatches, exceeded budgets,
strategy disagreement).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import bench as bench_mod
from . import fixtures
from .affine import BudgetExceeded, materialize_affine_direct, \
    materialize_affine_via_rop
from .clone import jvp_input, jvp_weight, vjp_input
from .network import GraphError, ShapeMismatch, shape_infer
from .spectral import AdjointMismatch, frobenius_norm_mc, probe_from_network, \
    top_k_eigen, top_k_svd, trace_mc
from .tenio import NetworkSchemaError, TensorFormatError, parse_network, \
    read_tensor, save_network, write_tensor

_DATA_ERRORS = (TensorFormatError, NetworkSchemaError, ShapeMismatch,
                GraphError, BudgetExceeded, bench_mod.StrategyMismatch,
                AdjointMismatch, FileNotFoundError, IsADirectoryError,
                PermissionError, ValueError)


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _seeded_input(net, seed: int, role: str) -> np.ndarray:
    return fixtures._rng(seed, role).standard_normal(net.input_shape)


def _build_parser() -> _Parser:
    p = _Parser(prog="cpajvp", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--net", required=True, help="network JSON path")
        sp.add_argument("--x", required=True, help="input .ten path")

    sp = sub.add_parser("jvp", help="Jacobian-vector product at x")
    common(sp)
    sp.add_argument("--u", required=True, help="direction .ten path")
    sp.add_argument("--out", required=True, help="output .ten path")

    sp = sub.add_parser("vjp", help="vector-Jacobian product at x")
    common(sp)
    sp.add_argument("--v", required=True, help="cotangent .ten path")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("jvp-weight", help="weight-direction derivative")
    common(sp)
    sp.add_argument("--node", required=True, help="dense or conv2d node id")
    sp.add_argument("--direction", required=True, help="direction .ten path")
    sp.add_argument("--out", required=True)

    sp = sub.add_parser("affine", help="materialize the region's slope and offset")
    common(sp)
    sp.add_argument("--out-slope", required=True)
    sp.add_argument("--out-bias", required=True)
    sp.add_argument("--method", choices=("direct", "rop"), default="direct")
    sp.add_argument("--budget", type=int, default=10 ** 6)

    for name in ("eigen", "svd"):
        sp = sub.add_parser(name, help=f"top-k {name} via block iteration")
        common(sp)
        sp.add_argument("--k", type=int, required=True)
        sp.add_argument("--tol", type=float, default=1e-8)
        sp.add_argument("--max-iter", type=int, default=500)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--out-values")
        if name == "eigen":
            sp.add_argument("--out-vectors")
        else:
            sp.add_argument("--out-left")
            sp.add_argument("--out-right")

    for name in ("frobnorm", "trace"):
        sp = sub.add_parser(name, help=f"Monte Carlo {name} estimate")
        common(sp)
        sp.add_argument("--samples", type=int, required=True)
        sp.add_argument("--seed", type=int, default=0)

    sp = sub.add_parser("bench", help="time the product strategies")
    sp.add_argument("--net", required=True)
    sp.add_argument("--x", help="input .ten path (seeded random if omitted)")
    sp.add_argument("--u", help="direction .ten path (seeded random if omitted)")
    sp.add_argument("--k-sweep", help="comma-separated output sizes; each gets "
                                      "a seeded dense head")
    sp.add_argument("--reps", type=int, default=100)
    sp.add_argument("--warmup", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv", help="CSV destination (stdout if omitted)")
    sp.add_argument("--no-forward", action="store_true",
                    help="skip the forward-pass baseline rows")

    sp = sub.add_parser("gen", help="generate a seeded fixture network")
    sp.add_argument("--arch", required=True, choices=fixtures.ARCHITECTURES)
    sp.add_argument("--seed", type=int, required=True)
    sp.add_argument("--scale", type=int, default=1)
    sp.add_argument("--out", required=True, help="output directory")
    sp.add_argument("--weights", choices=("files", "inline"), default="files")
    return p


def _cmd_jvp(args) -> int:
    net = parse_network(args.net)
    out = jvp_input(net, read_tensor(args.x), read_tensor(args.u))
    write_tensor(args.out, out)
    return 0


def _cmd_vjp(args) -> int:
    net = parse_network(args.net)
    out = vjp_input(net, read_tensor(args.x), read_tensor(args.v))
    write_tensor(args.out, out)
    return 0


def _cmd_jvp_weight(args) -> int:
    net = parse_network(args.net)
    out = jvp_weight(net, read_tensor(args.x), args.node,
                     read_tensor(args.direction))
    write_tensor(args.out, out)
    return 0


def _cmd_affine(args) -> int:
    net = parse_network(args.net)
    x = read_tensor(args.x)
    fn = materialize_affine_direct if args.method == "direct" \
        else materialize_affine_via_rop
    amap = fn(net, x, budget=args.budget)
    write_tensor(args.out_slope, amap.a)
    write_tensor(args.out_bias, amap.b)
    return 0


def _cmd_eigen(args) -> int:
    net = parse_network(args.net)
    probe = probe_from_network(net, read_tensor(args.x))
    res = top_k_eigen(probe, args.k, tol=args.tol, max_iter=args.max_iter,
                      seed=args.seed)
    print("values:", " ".join(repr(float(v)) for v in res.values))
    print(f"iterations: {res.iterations} converged: {res.converged} "
          f"residual: {res.residual!r}")
    print(f"rop_calls: {res.rop_calls} lop_calls: {res.lop_calls}")
    if args.out_values:
        write_tensor(args.out_values, res.values)
    if args.out_vectors:
        write_tensor(args.out_vectors, res.right_vectors)
    return 0


def _cmd_svd(args) -> int:
    net = parse_network(args.net)
    probe = probe_from_network(net, read_tensor(args.x))
    res = top_k_svd(probe, args.k, tol=args.tol, max_iter=args.max_iter,
                    seed=args.seed)
    print("values:", " ".join(repr(float(v)) for v in res.values))
    print(f"iterations: {res.iterations} converged: {res.converged} "
          f"residual: {res.residual!r}")
    print(f"rop_calls: {res.rop_calls} lop_calls: {res.lop_calls}")
    if args.out_values:
        write_tensor(args.out_values, res.values)
    if args.out_left:
        write_tensor(args.out_left, res.left_vectors)
    if args.out_right:
        write_tensor(args.out_right, res.right_vectors)
    return 0


def _cmd_frobnorm(args) -> int:
    net = parse_network(args.net)
    probe = probe_from_network(net, read_tensor(args.x))
    est, se = frobenius_norm_mc(probe, args.samples, seed=args.seed)
    print(f"estimate {est!r} stderr {se!r}")
    return 0


def _cmd_trace(args) -> int:
    net = parse_network(args.net)
    probe = probe_from_network(net, read_tensor(args.x))
    est, se = trace_mc(probe, args.samples, seed=args.seed)
    print(f"estimate {est!r} stderr {se!r}")
    return 0


def _cmd_bench(args) -> int:
    base = parse_network(args.net)
    if args.k_sweep:
        try:
            ks = [int(s) for s in args.k_sweep.split(",") if s.strip()]
        except ValueError:
            raise _UsageError(f"cpajvp bench: --k-sweep must be comma-separated "
                              f"ints, got {args.k_sweep!r}")
        if not ks or any(k < 1 for k in ks):
            raise _UsageError("cpajvp bench: --k-sweep needs positive ints")
        nets = [fixtures.with_dense_head(base, k, args.seed) for k in ks]
    else:
        nets = [base]
    x = read_tensor(args.x) if args.x else _seeded_input(base, args.seed, "bench-x")
    u = read_tensor(args.u) if args.u else _seeded_input(base, args.seed, "bench-u")
    reports = []
    for net in nets:
        reports.extend(bench_mod.run_benchmark(net, x, u,
                                               repetitions=args.reps,
                                               warmup=args.warmup))
        if not args.no_forward:
            reports.append(bench_mod.benchmark_forward(net, x,
                                                       repetitions=args.reps,
                                                       warmup=args.warmup))
    if args.csv:
        bench_mod.reports_to_csv(reports, args.csv)
    else:
        bench_mod.reports_to_csv(reports, sys.stdout)
    return 0


def _cmd_gen(args) -> int:
    net, x = fixtures.generate(args.arch, args.seed, args.scale)
    out = Path(args.out)
    path = save_network(net, out, weights=args.weights)
    write_tensor(out / "x.ten", x)
    shapes = shape_infer(net)
    print(f"{path} input {tuple(net.input_shape)} output "
          f"{shapes[net.output]}")
    return 0


_COMMANDS = {
    "jvp": _cmd_jvp,
    "vjp": _cmd_vjp,
    "jvp-weight": _cmd_jvp_weight,
    "affine": _cmd_affine,
    "eigen": _cmd_eigen,
    "svd": _cmd_svd,
    "frobnorm": _cmd_frobnorm,
    "trace": _cmd_trace,
    "bench": _cmd_bench,
    "gen": _cmd_gen,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help and friends
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except _UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except _DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
