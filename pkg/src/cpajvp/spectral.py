"""Matrix-free spectral algorithms on top of the frozen-replay products.

Nothing here ever sees the region matrix A itself. A LinearProbe wraps
the two products u -> A u and v -> A^T v; block subspace iteration,
block SVD, and the Monte Carlo estimators consume probes and count
every product call, so the per-iteration call complexity is checkable.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .clone import _state_shapes, _vjp_run
from .network import Network, ShapeMismatch, _evaluate, record_states
from .numerics import qr_householder


class AdjointMismatch(RuntimeError):
    """Raised when a probe's two products fail the adjoint identity."""


def _keyed_rng(*parts) -> np.random.Generator:
    digest = hashlib.blake2s("/".join(str(p) for p in parts).encode()).digest()
    return np.random.Generator(np.random.Philox(key=int.from_bytes(digest[:16], "little")))


class LinearProbe:
    """Counted access to u -> A u (rop) and v -> A^T v (lop).

    The two callables must be adjoint to each other; construction spot
    checks <A u, v> == <u, A^T v> on three seeded random pairs and
    raises AdjointMismatch beyond 1e-11 relative error. Counters
    increment exactly once per call.
    """

    def __init__(self, dim_in: int, dim_out: int,
                 rop: Callable[[np.ndarray], np.ndarray],
                 lop: Callable[[np.ndarray], np.ndarray],
                 check_adjoint: bool = True):
        if dim_in < 1 or dim_out < 1:
            raise ShapeMismatch(f"probe dims must be positive, got "
                                f"({dim_in}, {dim_out})")
        self.dim_in = int(dim_in)
        self.dim_out = int(dim_out)
        self._rop = rop
        self._lop = lop
        self.rop_calls = 0
        self.lop_calls = 0
        if check_adjoint:
            rng = _keyed_rng("probe-adjoint-check", dim_in, dim_out)
            for _ in range(3):
                u = rng.standard_normal(self.dim_in)
                v = rng.standard_normal(self.dim_out)
                left = float(np.dot(self.rop(u), v))
                right = float(np.dot(u, self.lop(v)))
                scale = max(abs(left), abs(right), 1e-300)
                if abs(left - right) > 1e-11 * scale:
                    raise AdjointMismatch(
                        f"<A u, v> = {left!r} but <u, A^T v> = {right!r} "
                        f"(relative error {abs(left - right) / scale:.3e})")
            # the self-check is not user work
            self.rop_calls = 0
            self.lop_calls = 0

    def rop(self, u: np.ndarray) -> np.ndarray:
        u = np.asarray(u, dtype=np.float64).reshape(-1)
        if u.shape[0] != self.dim_in:
            raise ShapeMismatch(f"rop input length {u.shape[0]}, expected {self.dim_in}")
        self.rop_calls += 1
        out = np.asarray(self._rop(u), dtype=np.float64).reshape(-1)
        if out.shape[0] != self.dim_out:
            raise ShapeMismatch(f"rop output length {out.shape[0]}, "
                                f"expected {self.dim_out}")
        return out

    def lop(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64).reshape(-1)
        if v.shape[0] != self.dim_out:
            raise ShapeMismatch(f"lop input length {v.shape[0]}, expected {self.dim_out}")
        self.lop_calls += 1
        out = np.asarray(self._lop(v), dtype=np.float64).reshape(-1)
        if out.shape[0] != self.dim_in:
            raise ShapeMismatch(f"lop output length {out.shape[0]}, "
                                f"expected {self.dim_in}")
        return out


def probe_from_network(net: Network, x: np.ndarray,
                       check_adjoint: bool = True) -> LinearProbe:
    """Probe for the region at x: one state recording shared by every
    subsequent product call."""
    _, state = record_states(net, x)
    shapes = _state_shapes(net, state)
    in_shape = tuple(net.input_shape)
    out_shape = shapes[net.output]
    dim_in = int(np.prod(in_shape))
    dim_out = int(np.prod(out_shape))

    def rop(u: np.ndarray) -> np.ndarray:
        out, _, _ = _evaluate(net, u.reshape(in_shape), state=state,
                              record=False, bias=False)
        return out.reshape(-1)

    def lop(v: np.ndarray) -> np.ndarray:
        return _vjp_run(net, state, v.reshape(out_shape), shapes).reshape(-1)

    return LinearProbe(dim_in, dim_out, rop, lop, check_adjoint=check_adjoint)


@dataclass
class SpectralResult:
    """Outcome of a block iteration: values descending, the subspace
    bases, and exact product-call counts for the run."""
    values: np.ndarray
    left_vectors: np.ndarray
    right_vectors: np.ndarray
    iterations: int
    converged: bool
    residual: float
    rop_calls: int
    lop_calls: int


def _orthonormal_init(rng: np.random.Generator, dim: int, k: int) -> np.ndarray:
    q, _ = qr_householder(rng.standard_normal((dim, k)))
    return q


def top_k_eigen(probe: LinearProbe, k: int, tol: float = 1e-8,
                max_iter: int = 500, seed: int = 0) -> SpectralResult:
    """Top-k eigenpairs by block subspace iteration.

    Per iteration: QR of the current image block, then k fresh rop
    calls on the orthonormalized columns. Stops when the image block
    is reproduced by the subspace, ||C - V Sigma||_F <= tol. Exactly
    k * (iterations + 1) rop calls and no lop calls.
    """
    if probe.dim_in != probe.dim_out:
        raise ShapeMismatch(f"eigen needs a square map, got "
                            f"({probe.dim_out}, {probe.dim_in})")
    dim = probe.dim_in
    if not 1 <= k <= dim:
        raise ShapeMismatch(f"k must be in [1, {dim}], got {k}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    rop0, lop0 = probe.rop_calls, probe.lop_calls
    rng = _keyed_rng("eigen-init", seed)
    v = _orthonormal_init(rng, dim, k)
    c = np.stack([probe.rop(v[:, i]) for i in range(k)], axis=1)
    iterations = 0
    converged = False
    residual = np.inf
    while iterations < max_iter:
        q, r = qr_householder(c)
        v = q
        sigma = r
        c = np.stack([probe.rop(v[:, i]) for i in range(k)], axis=1)
        residual = float(np.linalg.norm(c - v @ sigma, "fro"))
        iterations += 1
        if residual <= tol:
            converged = True
            break
    return SpectralResult(values=np.diag(sigma).copy(), left_vectors=v,
                          right_vectors=v, iterations=iterations,
                          converged=converged, residual=residual,
                          rop_calls=probe.rop_calls - rop0,
                          lop_calls=probe.lop_calls - lop0)


def top_k_svd(probe: LinearProbe, k: int, tol: float = 1e-8,
              max_iter: int = 500, seed: int = 0) -> SpectralResult:
    """Top-k singular triplets by alternating block iteration.

    Per iteration: QR of the image block gives U, k lop calls pull it
    back, QR of that gives V and Sigma, then k rop calls refresh the
    image block. Stops on ||C - U Sigma||_F <= tol. Exactly
    k * iterations + k rop calls and k * iterations lop calls.
    """
    if not 1 <= k <= min(probe.dim_in, probe.dim_out):
        raise ShapeMismatch(f"k must be in [1, {min(probe.dim_in, probe.dim_out)}], "
                            f"got {k}")
    if max_iter < 1:
        raise ValueError(f"max_iter must be >= 1, got {max_iter}")
    rop0, lop0 = probe.rop_calls, probe.lop_calls
    rng = _keyed_rng("svd-init", seed)
    v = _orthonormal_init(rng, probe.dim_in, k)
    u = _orthonormal_init(rng, probe.dim_out, k)
    sigma = rng.standard_normal((k, k))
    c = np.stack([probe.rop(v[:, i]) for i in range(k)], axis=1)
    iterations = 0
    residual = float(np.linalg.norm(c - u @ sigma, "fro"))
    converged = residual <= tol
    while not converged and iterations < max_iter:
        q, _ = qr_householder(c)
        u = q
        b = np.stack([probe.lop(u[:, i]) for i in range(k)], axis=1)
        q2, r2 = qr_householder(b)
        v = q2
        sigma = r2
        c = np.stack([probe.rop(v[:, i]) for i in range(k)], axis=1)
        residual = float(np.linalg.norm(c - u @ sigma, "fro"))
        iterations += 1
        converged = residual <= tol
    return SpectralResult(values=np.diag(sigma).copy(), left_vectors=u,
                          right_vectors=v, iterations=iterations,
                          converged=converged, residual=residual,
                          rop_calls=probe.rop_calls - rop0,
                          lop_calls=probe.lop_calls - lop0)


def frobenius_norm_mc(probe: LinearProbe, n_samples: int,
                      seed: int = 0) -> tuple[float, float]:
    """Monte Carlo Frobenius norm: E ||A u||^2 = ||A||_F^2 for standard
    Gaussian u. Returns (estimate, stderr), the stderr mapped through
    the square root by the delta method."""
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples, got {n_samples}")
    rng = _keyed_rng("frobenius-mc", seed)
    samples = np.empty(n_samples)
    for i in range(n_samples):
        out = probe.rop(rng.standard_normal(probe.dim_in))
        samples[i] = np.dot(out, out)
    mean = float(np.mean(samples))
    se_mean = float(np.sqrt(np.sum((samples - mean) ** 2)
                            / (n_samples * (n_samples - 1))))
    if mean <= 0.0:
        return 0.0, 0.0
    est = float(np.sqrt(mean))
    return est, se_mean / (2.0 * est)


def trace_mc(probe: LinearProbe, n_samples: int,
             seed: int = 0) -> tuple[float, float]:
    """Hutchinson trace estimate with Rademacher probes:
    E u^T A u = tr A for u uniform on {-1, +1}^d. Returns
    (estimate, stderr)."""
    if probe.dim_in != probe.dim_out:
        raise ShapeMismatch(f"trace needs a square map, got "
                            f"({probe.dim_out}, {probe.dim_in})")
    if n_samples < 2:
        raise ValueError(f"need at least 2 samples, got {n_samples}")
    rng = _keyed_rng("trace-mc", seed)
    samples = np.empty(n_samples)
    for i in range(n_samples):
        u = rng.integers(0, 2, probe.dim_in).astype(np.float64) * 2.0 - 1.0
        samples[i] = np.dot(u, probe.rop(u))
    mean = float(np.mean(samples))
    se_mean = float(np.sqrt(np.sum((samples - mean) ** 2)
                            / (n_samples * (n_samples - 1))))
    return mean, se_mean
