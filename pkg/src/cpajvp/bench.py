"""Benchmark harness comparing three product strategies.

All three compute the same J u for the region at x:

* batch-jacobian: materialize every Jacobian row with one transposed
  replay per output coordinate, then multiply by u. One recording pass
  plus d_out transposed passes.
* double-vjp: realize the transposed map once, then exploit its
  linearity; the second transposition collapses to a single forward
  linear replay. One recording, one transposed, one linear pass.
* clone: a single batched pass over [x, u, 0] with states taken from
  the x slice; the product is the difference of the two branch outputs
  and f(x) falls out of slice 0 for free.

The harness cross-checks the strategies against each other before any
timing and refuses to produce numbers when they disagree.
"""
from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field
from statistics import mean, median, pstdev

import numpy as np

from .affine import BudgetExceeded
from .clone import _concat_pass, _state_shapes, _vjp_run
from .network import Network, ShapeMismatch, _evaluate, as_f64, forward, \
    record_states, shape_infer


class StrategyMismatch(RuntimeError):
    """Raised when strategies disagree beyond tolerance; no timing is
    reported in that case."""


@dataclass
class PassCounts:
    forward: int = 0
    frozen: int = 0
    transposed: int = 0


@dataclass
class BenchReport:
    strategy: str
    d_in: int
    d_out: int
    repetitions: int
    median_s: float
    mean_s: float
    std_s: float
    passes: PassCounts = field(default_factory=PassCounts)

    def __post_init__(self):
        if self.repetitions < 10:
            raise ValueError(f"need at least 10 repetitions, got {self.repetitions}")
        if self.median_s > self.mean_s + 3.0 * self.std_s + 1e-12:
            raise ValueError(f"median {self.median_s} exceeds mean + 3 std "
                             f"({self.mean_s} + 3 * {self.std_s})")


# ---------------------------------------------------------------------------
# strategies

def strategy_batch_jacobian(net: Network, x: np.ndarray, u: np.ndarray,
                            counts: PassCounts | None = None,
                            row_budget: int = 4096) -> np.ndarray:
    """J u by stacking all d_out Jacobian rows from transposed replays."""
    _, state = record_states(net, x)
    if counts is not None:
        counts.forward += 1
    shapes = _state_shapes(net, state)
    out_shape = shapes[net.output]
    d_out = int(np.prod(out_shape))
    if d_out > row_budget:
        raise BudgetExceeded(f"{d_out} Jacobian rows exceed the row budget "
                             f"{row_budget}")
    rows = np.empty((d_out, int(np.prod(state.input.shape))))
    e = np.zeros(d_out)
    for i in range(d_out):
        e[i] = 1.0
        rows[i] = _vjp_run(net, state, e.reshape(out_shape), shapes).reshape(-1)
        e[i] = 0.0
        if counts is not None:
            counts.transposed += 1
    return (rows @ as_f64(u).reshape(-1)).reshape(out_shape)


def strategy_double_vjp(net: Network, x: np.ndarray, u: np.ndarray,
                        counts: PassCounts | None = None) -> np.ndarray:
    """J u through two nested transpositions.

    The inner transposed replay realizes v -> J^T v; that map is linear
    in v, so transposing it against u needs no second recording, just
    one forward linear replay of u."""
    _, state = record_states(net, x)
    if counts is not None:
        counts.forward += 1
    shapes = _state_shapes(net, state)
    probe = np.ones(shapes[net.output])
    _vjp_run(net, state, probe, shapes)  # realizes the inner map
    if counts is not None:
        counts.transposed += 1
    out, _, _ = _evaluate(net, as_f64(u), state=state, record=False, bias=False)
    if counts is not None:
        counts.frozen += 1
    return out


def strategy_clone(net: Network, x: np.ndarray, u: np.ndarray,
                   counts: PassCounts | None = None) -> tuple[np.ndarray, np.ndarray]:
    """J u from one batched pass over [x, u, 0]; returns (J u, f(x)),
    the network output being a free side product of the x slice."""
    zero = np.zeros_like(as_f64(x))
    fx, outs = _concat_pass(net, x, [as_f64(u), zero])
    if counts is not None:
        counts.frozen += 1
    return outs[0] - outs[1], fx


_STRATEGIES = ("batch-jacobian", "double-vjp", "clone")


def _run_strategy(name: str, net: Network, x, u,
                  counts: PassCounts | None = None) -> np.ndarray:
    if name == "batch-jacobian":
        return strategy_batch_jacobian(net, x, u, counts)
    if name == "double-vjp":
        return strategy_double_vjp(net, x, u, counts)
    if name == "clone":
        return strategy_clone(net, x, u, counts)[0]
    raise ValueError(f"unknown strategy {name!r}; choose from {_STRATEGIES}")


# ---------------------------------------------------------------------------
# harness

def _time_callable(fn, repetitions: int, warmup: int) -> tuple[float, float, float]:
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return median(times), mean(times), pstdev(times)


def run_benchmark(net: Network, x: np.ndarray, u: np.ndarray,
                  strategies=_STRATEGIES, repetitions: int = 100,
                  warmup: int = 5) -> list[BenchReport]:
    """Cross-check the strategies, then time each one.

    Every strategy must reproduce every other within 1e-9 relative
    error on this instance, else StrategyMismatch aborts the run and
    nothing is timed. Wall time is measured per call with a monotonic
    clock after warmup discard runs.
    """
    if repetitions < 10:
        raise ValueError(f"need at least 10 repetitions, got {repetitions}")
    if warmup < 0:
        raise ValueError(f"warmup must be >= 0, got {warmup}")
    strategies = list(strategies)
    shapes = shape_infer(net)
    d_in = int(np.prod(net.input_shape))
    d_out = int(np.prod(shapes[net.output]))
    results = {}
    counted = {}
    for name in strategies:
        counts = PassCounts()
        results[name] = _run_strategy(name, net, x, u, counts)
        counted[name] = counts
    names = list(results)
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            a, b = results[names[i]], results[names[j]]
            scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-300)
            err = float(np.max(np.abs(a - b))) / scale
            if err > 1e-9:
                raise StrategyMismatch(
                    f"{names[i]} and {names[j]} disagree (relative error "
                    f"{err:.3e}); not timing a wrong answer")
    reports = []
    for name in strategies:
        med, avg, std = _time_callable(lambda n=name: _run_strategy(n, net, x, u),
                                       repetitions, warmup)
        reports.append(BenchReport(strategy=name, d_in=d_in, d_out=d_out,
                                   repetitions=repetitions, median_s=med,
                                   mean_s=avg, std_s=std, passes=counted[name]))
    return reports


def benchmark_forward(net: Network, x: np.ndarray, repetitions: int = 100,
                      warmup: int = 5) -> BenchReport:
    """Baseline timing of the plain forward pass, for slowdown ratios."""
    shapes = shape_infer(net)
    med, avg, std = _time_callable(lambda: forward(net, x), repetitions, warmup)
    return BenchReport(strategy="forward", d_in=int(np.prod(net.input_shape)),
                       d_out=int(np.prod(shapes[net.output])),
                       repetitions=repetitions, median_s=med, mean_s=avg,
                       std_s=std, passes=PassCounts(forward=1))


CSV_HEADER = ["strategy", "d_in", "d_out", "reps", "median_s", "mean_s",
              "std_s", "passes_forward", "passes_frozen", "passes_transposed"]


def reports_to_csv(reports: list[BenchReport], dest) -> None:
    """Write reports as RFC 4180 CSV to a path or text file object."""
    own = isinstance(dest, (str, bytes)) or hasattr(dest, "__fspath__")
    handle = open(dest, "w", newline="") if own else dest
    try:
        writer = csv.writer(handle, lineterminator="\r\n")
        writer.writerow(CSV_HEADER)
        for r in reports:
            writer.writerow([r.strategy, r.d_in, r.d_out, r.repetitions,
                             repr(r.median_s), repr(r.mean_s), repr(r.std_s),
                             r.passes.forward, r.passes.frozen,
                             r.passes.transposed])
    finally:
        if own:
            handle.close()
