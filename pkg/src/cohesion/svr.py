"""Epsilon-insensitive support vector regression.

Trains by sequential minimal optimization (SMO) on the dual

    maximize  -1/2 sum_ij beta_i beta_j K(x_i, x_j)
              - epsilon sum_i |beta_i| + sum_i y_i beta_i
    s.t.      sum_i beta_i = 0,   |beta_i| <= C

in the doubled parameterization theta = (alpha, alpha*) in [0, C]^{2n},
beta = alpha - alpha*.  Working pairs are chosen by the maximal-violating-pair
rule with first-index tie-breaks, so training is deterministic.  A slow
projected-gradient solver over the same box/hyperplane feasible set is
provided as an independent reference for verification.

Model file format (UTF-8, LF):
    line 1: `#cohesion-svr v1 kernel=<linear|rbf> gamma=<g> bias=<b> dim=<D> nsv=<K>`
    line 2: standardizer mean (D space-separated floats)
    line 3: standardizer scale (D space-separated floats)
    then K lines `<beta>\\t<v1> <v2> ... <vD>`
"""

from __future__ import annotations

import math
import re
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import IO, Iterable, Sequence

import numpy as np

from .errors import (
    ConvergenceError,
    DimMismatchError,
    EmptyFileError,
    EmptyTrainingSetError,
    HeaderMismatchError,
    InfeasiblePointError,
    InvariantViolationError,
    MalformedRecordError,
)
from .feature_store import Standardizer, apply_standardizer, format_float, identity_standardizer

KERNEL_KINDS = ("linear", "rbf")

# Below this magnitude a dual coefficient counts as zero (not a support vector).
BETA_ZERO = 1e-12

# Curvature floor for degenerate working pairs.
ETA_FLOOR = 1e-12

_MODEL_HEADER_RE = re.compile(
    r"^#cohesion-svr v1 kernel=(linear|rbf) gamma=(\S+) bias=(\S+) dim=(\d+) nsv=(\d+)$"
)


@dataclass(frozen=True)
class KernelSpec:
    """Kernel choice: `linear` (dot product) or `rbf` (exp(-gamma ||x-y||^2))."""

    kind: str
    gamma: float | None = None

    def __post_init__(self):
        if self.kind not in KERNEL_KINDS:
            raise InvariantViolationError(
                f"kernel kind must be one of {KERNEL_KINDS}, got {self.kind!r}"
            )
        if self.kind == "rbf":
            if self.gamma is None or not (self.gamma > 0):
                raise InvariantViolationError(
                    f"rbf kernel requires gamma > 0, got {self.gamma!r}"
                )


@dataclass(frozen=True)
class SvrHyperparams:
    C: float = 1.0
    epsilon: float = 0.1
    tol: float = 1e-3
    max_iter: int = 1_000_000

    def __post_init__(self):
        if not self.C > 0:
            raise InvariantViolationError(f"C must be > 0, got {self.C}")
        if self.epsilon < 0:
            raise InvariantViolationError(f"epsilon must be >= 0, got {self.epsilon}")
        if not self.tol > 0:
            raise InvariantViolationError(f"tol must be > 0, got {self.tol}")
        if self.max_iter < 1:
            raise InvariantViolationError(f"max_iter must be >= 1, got {self.max_iter}")


def kernel_eval(k: KernelSpec, x: np.ndarray, y: np.ndarray) -> float:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimMismatchError(f"kernel arguments must be equal-length vectors, got {x.shape} vs {y.shape}")
    if k.kind == "linear":
        return float(x @ y)
    d = x - y
    return float(np.exp(-k.gamma * (d @ d)))


def kernel_matrix(k: KernelSpec, X: np.ndarray, Z: np.ndarray | None = None) -> np.ndarray:
    """Gram matrix K[i, j] = k(X[i], Z[j]); Z defaults to X."""
    X = np.asarray(X, dtype=np.float64)
    Z = X if Z is None else np.asarray(Z, dtype=np.float64)
    if X.ndim != 2 or Z.ndim != 2 or X.shape[1] != Z.shape[1]:
        raise DimMismatchError(f"incompatible shapes {X.shape} vs {Z.shape}")
    if k.kind == "linear":
        return X @ Z.T
    sq = (
        (X * X).sum(axis=1)[:, None]
        + (Z * Z).sum(axis=1)[None, :]
        - 2.0 * (X @ Z.T)
    )
    np.clip(sq, 0.0, None, out=sq)
    return np.exp(-k.gamma * sq)


class _KernelRowCache:
    """LRU cache of kernel rows over the training set, computed on demand."""

    def __init__(self, X: np.ndarray, kernel: KernelSpec, capacity: int = 512):
        if capacity < 1:
            raise InvariantViolationError(f"cache capacity must be >= 1, got {capacity}")
        self.X = X
        self.kernel = kernel
        self.capacity = capacity
        self._sq = (X * X).sum(axis=1) if kernel.kind == "rbf" else None
        self._rows: OrderedDict[int, np.ndarray] = OrderedDict()
        self.misses = 0

    def row(self, i: int) -> np.ndarray:
        cached = self._rows.get(i)
        if cached is not None:
            self._rows.move_to_end(i)
            return cached
        self.misses += 1
        if self.kernel.kind == "linear":
            row = self.X @ self.X[i]
        else:
            sq = self._sq + self._sq[i] - 2.0 * (self.X @ self.X[i])
            np.clip(sq, 0.0, None, out=sq)
            row = np.exp(-self.kernel.gamma * sq)
        self._rows[i] = row
        if len(self._rows) > self.capacity:
            self._rows.popitem(last=False)
        return row


@dataclass
class DualSolution:
    """Solver output: signed dual coefficients, bias, and stop diagnostics."""

    betas: np.ndarray
    bias: float
    iterations: int
    violation: float
    converged: bool


def _check_training_inputs(X, y) -> tuple[np.ndarray, np.ndarray]:
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if X.size == 0 or y.size == 0:
        raise EmptyTrainingSetError("training set is empty")
    if X.ndim != 2:
        raise DimMismatchError("training vectors must share one length")
    if y.ndim != 1 or len(y) != X.shape[0]:
        raise DimMismatchError(f"got {X.shape[0]} vectors but {y.shape} targets")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
        raise InvariantViolationError("training data must be finite")
    return X, y


def _bias_from_state(vals: np.ndarray, theta: np.ndarray, C: float, n: int) -> float:
    """KKT bias: mean over free variables, else midpoint of the feasible interval."""
    free = (theta > 0.0) & (theta < C)
    if np.any(free):
        return float(vals[free].mean())
    up = np.concatenate([theta[:n] < C, theta[n:] > 0.0])
    low = np.concatenate([theta[:n] > 0.0, theta[n:] < C])
    hi = vals[up].max() if np.any(up) else -math.inf
    lo = vals[low].min() if np.any(low) else math.inf
    if math.isinf(hi) and math.isinf(lo):
        return 0.0
    if math.isinf(hi):
        return float(lo)
    if math.isinf(lo):
        return float(hi)
    return float((hi + lo) / 2.0)


def solve_dual(
    X,
    y,
    kernel: KernelSpec,
    hyper: SvrHyperparams,
    cache_rows: int = 512,
) -> DualSolution:
    """SMO with maximal-violating-pair selection on theta = (alpha, alpha*).

    Each step solves the two-variable subproblem exactly, snapping variables
    that hit a bound to the exact bound value.  Stops when the KKT violation
    max over I_up minus min over I_low drops to `tol`.
    """
    X, y = _check_training_inputs(X, y)
    n = len(y)
    C, eps, tol = hyper.C, hyper.epsilon, hyper.tol

    cache = _KernelRowCache(X, kernel, capacity=cache_rows)
    if kernel.kind == "rbf":
        diag = np.ones(n)
    else:
        diag = (X * X).sum(axis=1)

    theta = np.zeros(2 * n)
    # Gradient of 1/2 theta' Q theta + p' theta at theta = 0 is p.
    G = np.concatenate([eps - y, eps + y])
    neg_inf = -np.inf
    pos_inf = np.inf

    iterations = 0
    violation = pos_inf
    converged = False
    for _ in range(hyper.max_iter):
        vals = np.concatenate([-G[:n], G[n:]])  # -s * G
        up = np.concatenate([theta[:n] < C, theta[n:] > 0.0])
        low = np.concatenate([theta[:n] > 0.0, theta[n:] < C])
        i = int(np.argmax(np.where(up, vals, neg_inf)))
        j = int(np.argmin(np.where(low, vals, pos_inf)))
        violation = float(vals[i] - vals[j])
        if violation <= tol:
            converged = True
            break

        si = 1.0 if i < n else -1.0
        sj = 1.0 if j < n else -1.0
        bi, bj = i % n, j % n
        Ki = cache.row(bi)
        Kj = cache.row(bj)
        eta = diag[bi] + diag[bj] - 2.0 * Ki[bj]
        if eta < ETA_FLOOR:
            eta = ETA_FLOOR
        step = violation / eta
        limit_i = (C - theta[i]) if si > 0 else theta[i]
        limit_j = theta[j] if sj > 0 else (C - theta[j])
        step = min(step, limit_i, limit_j)

        old_i, old_j = theta[i], theta[j]
        if step == limit_i:
            theta[i] = C if si > 0 else 0.0
        else:
            theta[i] = old_i + si * step
        if step == limit_j:
            theta[j] = 0.0 if sj > 0 else C
        else:
            theta[j] = old_j - sj * step

        di = si * (theta[i] - old_i)
        dj = sj * (theta[j] - old_j)
        delta = di * Ki + dj * Kj
        G[:n] += delta
        G[n:] -= delta
        iterations += 1

    vals = np.concatenate([-G[:n], G[n:]])
    bias = _bias_from_state(vals, theta, C, n)
    betas = theta[:n] - theta[n:]
    return DualSolution(
        betas=betas,
        bias=bias,
        iterations=iterations,
        violation=violation,
        converged=converged,
    )


def _project_box_hyperplane(v: np.ndarray, C: float, n: int) -> np.ndarray:
    """Euclidean projection onto {0 <= theta <= C, sum(theta[:n]) = sum(theta[n:])}.

    The shifted point theta(lam) = clip(v - lam*s, 0, C) makes
    h(lam) = s' theta(lam) continuous, piecewise linear, and nonincreasing;
    the root is found exactly on the breakpoint grid.
    """
    a, b = v[:n], v[n:]
    bps = np.concatenate([a - C, a, -b, C - b])
    bps.sort()

    def h(lam: np.ndarray) -> np.ndarray:
        lam = np.atleast_1d(lam)
        first = np.clip(a[None, :] - lam[:, None], 0.0, C).sum(axis=1)
        second = np.clip(b[None, :] + lam[:, None], 0.0, C).sum(axis=1)
        return first - second

    hs = h(bps)
    idx = np.nonzero(hs <= 0.0)[0]
    if len(idx) == 0:
        lam = float(bps[-1])  # h > 0 everywhere on the grid: degenerate, take the end
    else:
        k = int(idx[0])
        if k == 0 or hs[k] == 0.0:
            lam = float(bps[k])
        else:
            h_prev, h_cur = float(hs[k - 1]), float(hs[k])
            if h_prev - h_cur > 0.0:
                lam = float(bps[k - 1] + (bps[k] - bps[k - 1]) * h_prev / (h_prev - h_cur))
            else:
                lam = float(bps[k])
    return np.concatenate([np.clip(a - lam, 0.0, C), np.clip(b + lam, 0.0, C)])


def solve_dual_projected(
    X,
    y,
    kernel: KernelSpec,
    hyper: SvrHyperparams,
    max_iter: int = 30_000,
    stall_window: int = 300,
    stall_rtol: float = 1e-13,
) -> DualSolution:
    """Reference solver: accelerated projected gradient with exact projection.

    Independent of the SMO update rules; intended for verification on small
    problems (dense Gram matrix, cold start).  Much slower than solve_dual.
    """
    X, y = _check_training_inputs(X, y)
    n = len(y)
    C, eps = hyper.C, hyper.epsilon
    K = kernel_matrix(kernel, X)
    p = np.concatenate([eps - y, eps + y])

    # Q = [[K, -K], [-K, K]] has largest eigenvalue 2*lambda_max(K).
    lip = 2.0 * float(np.linalg.eigvalsh(K).max())
    gstep = 1.0 / max(lip, 1e-12)

    def objective(theta: np.ndarray) -> float:
        m = K @ (theta[:n] - theta[n:])
        return float(0.5 * (theta[:n] - theta[n:]) @ m + p @ theta)

    def gradient(theta: np.ndarray) -> np.ndarray:
        m = K @ (theta[:n] - theta[n:])
        return np.concatenate([m, -m]) + p

    theta = np.zeros(2 * n)
    momentum = theta.copy()
    t_acc = 1.0
    best = theta.copy()
    best_f = objective(theta)
    last_mark = best_f
    iterations = 0
    for it in range(1, max_iter + 1):
        candidate = _project_box_hyperplane(momentum - gstep * gradient(momentum), C, n)
        f_cand = objective(candidate)
        if f_cand > objective(theta):
            # Restart acceleration from the last monotone point.
            momentum = theta.copy()
            t_acc = 1.0
            candidate = _project_box_hyperplane(theta - gstep * gradient(theta), C, n)
            f_cand = objective(candidate)
        t_next = (1.0 + math.sqrt(1.0 + 4.0 * t_acc * t_acc)) / 2.0
        momentum = candidate + ((t_acc - 1.0) / t_next) * (candidate - theta)
        theta = candidate
        t_acc = t_next
        iterations = it
        if f_cand < best_f:
            best_f = f_cand
            best = candidate.copy()
        if it % stall_window == 0:
            if last_mark - best_f <= stall_rtol * (1.0 + abs(best_f)):
                break
            last_mark = best_f

    # A few plain monotone steps to polish the best iterate.
    theta = best
    for _ in range(200):
        candidate = _project_box_hyperplane(theta - gstep * gradient(theta), C, n)
        if objective(candidate) >= objective(theta):
            break
        theta = candidate

    G = gradient(theta)
    vals = np.concatenate([-G[:n], G[n:]])
    up = np.concatenate([theta[:n] < C, theta[n:] > 0.0])
    low = np.concatenate([theta[:n] > 0.0, theta[n:] < C])
    hi = vals[up].max() if np.any(up) else -np.inf
    lo = vals[low].min() if np.any(low) else np.inf
    violation = float(hi - lo)
    return DualSolution(
        betas=theta[:n] - theta[n:],
        bias=_bias_from_state(vals, theta, hyper.C, n),
        iterations=iterations,
        violation=violation,
        converged=True,
    )


@dataclass(frozen=True, eq=False)
class SvrModel:
    """Trained regressor: f(x) = sum_i beta_i k(sv_i, standardize(x)) + bias."""

    kernel: KernelSpec
    support_vectors: np.ndarray  # (nsv, dim), standardized space
    dual_coefs: np.ndarray  # (nsv,)
    bias: float
    standardizer: Standardizer

    def __post_init__(self):
        sv = np.asarray(self.support_vectors, dtype=np.float64)
        coefs = np.asarray(self.dual_coefs, dtype=np.float64)
        if sv.size == 0:
            sv = sv.reshape(0, self.standardizer.dim)
        object.__setattr__(self, "support_vectors", sv)
        object.__setattr__(self, "dual_coefs", coefs)
        if sv.ndim != 2 or coefs.ndim != 1 or sv.shape[0] != len(coefs):
            raise InvariantViolationError(
                f"support vector shape {sv.shape} does not match {len(coefs)} coefficients"
            )
        if sv.shape[1] != self.standardizer.dim:
            raise DimMismatchError(
                f"support vectors have dim {sv.shape[1]}, standardizer wants {self.standardizer.dim}"
            )
        if not (
            np.all(np.isfinite(sv))
            and np.all(np.isfinite(coefs))
            and math.isfinite(self.bias)
        ):
            raise InvariantViolationError("model parameters must be finite")

    @property
    def dim(self) -> int:
        return self.standardizer.dim

    @property
    def nsv(self) -> int:
        return len(self.dual_coefs)


def train_svr(
    X,
    y,
    kernel: KernelSpec,
    hyper: SvrHyperparams,
    standardizer: Standardizer | None = None,
    cache_rows: int = 512,
) -> SvrModel:
    """Train on pre-standardized vectors X with targets y in [0, 1].

    `standardizer` is stored on the model so raw inputs can be standardized
    at prediction time; it defaults to the identity (X used as-is either way).
    Raises ConvergenceError carrying the best-iterate model when max_iter is
    exhausted above tol.
    """
    X, y = _check_training_inputs(X, y)
    n, dim = X.shape
    if standardizer is None:
        standardizer = identity_standardizer(dim)
    if standardizer.dim != dim:
        raise DimMismatchError(
            f"standardizer dim {standardizer.dim} does not match data dim {dim}"
        )

    solution = solve_dual(X, y, kernel, hyper, cache_rows=cache_rows)
    betas = solution.betas
    if np.abs(betas).max(initial=0.0) > hyper.C + 1e-12:
        raise InvariantViolationError("solver produced |beta| > C")
    if abs(betas.sum()) > 1e-6 * hyper.C * n:
        raise InvariantViolationError("solver produced sum(beta) != 0")

    keep = np.abs(betas) > BETA_ZERO
    model = SvrModel(
        kernel=kernel,
        support_vectors=X[keep],
        dual_coefs=betas[keep],
        bias=solution.bias,
        standardizer=standardizer,
    )
    if not solution.converged:
        raise ConvergenceError(
            f"SMO hit max_iter={hyper.max_iter} with KKT violation "
            f"{solution.violation:.3e} > tol={hyper.tol}",
            betas=betas,
            bias=solution.bias,
            violation=solution.violation,
            model=model,
        )
    return model


def predict_batch(m: SvrModel, X_raw) -> np.ndarray:
    """Predictions for raw (unstandardized) row vectors."""
    X_raw = np.asarray(X_raw, dtype=np.float64)
    if X_raw.ndim != 2 or X_raw.shape[1] != m.dim:
        raise DimMismatchError(f"expected (n, {m.dim}) inputs, got {X_raw.shape}")
    Z = (X_raw - m.standardizer.mean) / m.standardizer.scale
    if m.nsv == 0:
        return np.full(len(Z), m.bias)
    return kernel_matrix(m.kernel, Z, m.support_vectors) @ m.dual_coefs + m.bias


def predict_svr(m: SvrModel, x_raw) -> float:
    """f(x) for one raw vector; not clamped (clamping happens at denormalization)."""
    x_raw = np.asarray(x_raw, dtype=np.float64)
    if x_raw.ndim != 1:
        raise DimMismatchError("predict_svr expects a single vector")
    return float(predict_batch(m, x_raw[None, :])[0])


def dual_objective(X, y, kernel: KernelSpec, hyper: SvrHyperparams, betas) -> float:
    """Dual objective at a feasible beta (sum zero, |beta_i| <= C)."""
    X, y = _check_training_inputs(X, y)
    betas = np.asarray(betas, dtype=np.float64)
    if betas.shape != y.shape:
        raise DimMismatchError(f"expected {y.shape} betas, got {betas.shape}")
    if not np.all(np.isfinite(betas)):
        raise InfeasiblePointError("betas must be finite")
    if abs(betas.sum()) > 1e-9:
        raise InfeasiblePointError(f"sum(beta) = {betas.sum():.3e} is not 0 within 1e-9")
    if np.abs(betas).max(initial=0.0) > hyper.C + 1e-12:
        raise InfeasiblePointError("some |beta_i| exceeds C")
    K = kernel_matrix(kernel, X)
    return float(
        -0.5 * betas @ (K @ betas)
        - hyper.epsilon * np.abs(betas).sum()
        + y @ betas
    )


def write_model(stream: IO[str], m: SvrModel) -> None:
    gamma = m.kernel.gamma if m.kernel.kind == "rbf" else 0.0
    stream.write(
        f"#cohesion-svr v1 kernel={m.kernel.kind} gamma={format_float(gamma)} "
        f"bias={format_float(m.bias)} dim={m.dim} nsv={m.nsv}\n"
    )
    stream.write(" ".join(format_float(v) for v in m.standardizer.mean) + "\n")
    stream.write(" ".join(format_float(v) for v in m.standardizer.scale) + "\n")
    for beta, sv in zip(m.dual_coefs, m.support_vectors):
        stream.write(f"{format_float(beta)}\t" + " ".join(format_float(v) for v in sv) + "\n")


def _parse_vector(text: str, dim: int, lineno: int, what: str) -> np.ndarray:
    tokens = text.split()
    if len(tokens) != dim:
        raise MalformedRecordError(
            f"line {lineno}: expected {dim} {what} values, got {len(tokens)}"
        )
    try:
        vec = np.array([float(t) for t in tokens], dtype=np.float64)
    except ValueError as exc:
        raise MalformedRecordError(f"line {lineno}: {exc}") from exc
    if not np.all(np.isfinite(vec)):
        raise MalformedRecordError(f"line {lineno}: non-finite {what} value")
    return vec


def parse_model(stream: Iterable[str]) -> SvrModel:
    lines = iter(stream)
    first = next(lines, None)
    if first is None:
        raise EmptyFileError("model file has no header line")
    match = _MODEL_HEADER_RE.match(first.rstrip("\n"))
    if not match:
        raise HeaderMismatchError(f"bad model header: {first.rstrip()!r}")
    kind, gamma_text, bias_text, dim_text, nsv_text = match.groups()
    dim, nsv = int(dim_text), int(nsv_text)
    try:
        gamma = float(gamma_text)
        bias = float(bias_text)
    except ValueError as exc:
        raise HeaderMismatchError(f"bad model header numbers: {exc}") from exc
    kernel = KernelSpec("rbf", gamma) if kind == "rbf" else KernelSpec("linear")

    body: list[tuple[int, str]] = []
    for lineno, raw in enumerate(lines, start=2):
        line = raw.rstrip("\n")
        if not line or line.startswith("#"):
            continue
        body.append((lineno, line))
    if len(body) != 2 + nsv:
        raise MalformedRecordError(
            f"model file has {len(body)} data lines, header promises {2 + nsv}"
        )
    mean = _parse_vector(body[0][1], dim, body[0][0], "mean")
    scale = _parse_vector(body[1][1], dim, body[1][0], "scale")
    betas = np.zeros(nsv)
    svs = np.zeros((nsv, dim))
    for row, (lineno, line) in enumerate(body[2:]):
        parts = line.split("\t")
        if len(parts) != 2:
            raise MalformedRecordError(
                f"line {lineno}: expected `<beta>\\t<vector>`, got {len(parts)} fields"
            )
        try:
            betas[row] = float(parts[0])
        except ValueError as exc:
            raise MalformedRecordError(f"line {lineno}: {exc}") from exc
        if not math.isfinite(betas[row]):
            raise MalformedRecordError(f"line {lineno}: non-finite beta")
        svs[row] = _parse_vector(parts[1], dim, lineno, "support vector")
    return SvrModel(
        kernel=kernel,
        support_vectors=svs,
        dual_coefs=betas,
        bias=bias,
        standardizer=Standardizer(mean, scale),
    )


def save_model(path: str | Path, m: SvrModel) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        write_model(fh, m)


def load_model(path: str | Path) -> SvrModel:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_model(fh)


def default_gamma(dim: int) -> float:
    """Default rbf width: 1/dim."""
    if dim < 1:
        raise InvariantViolationError(f"dim must be >= 1, got {dim}")
    return 1.0 / dim
