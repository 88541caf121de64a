"""Unrolled matrix-decomposition solvers: soft VQ, soft CD and NMF with MU rules.

The step functions accept either numpy arrays or tape :class:`Var` values.
With arrays they return arrays; with any ``Var`` input they return ``Var``
outputs so that the same code path can be differentiated.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .matcore import EPS, NumericError, ParameterError, ShapeError, tape
from .matcore.kernels import column_softmax, cosine_similarity, l2_normalize_columns
from .matcore.serialize import write_csv
from .matcore.tape import Var

KINDS = ("vq", "cd", "nmf")

DEFAULT_K = 6
DEFAULT_TEMPERATURE = 0.01
DEFAULT_BETA = 0.01
DEFAULT_R = 64
NMF_INIT_TEMPERATURE = 1.0
WARM_MOMENTUM = 0.9


class DomainError(ValueError):
    """Input outside the domain of the solver (e.g. negative data for NMF)."""


@dataclass(frozen=True)
class MdModel:
    kind: str
    temperature: float = DEFAULT_TEMPERATURE
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ParameterError(f"unknown model {self.kind!r}; expected one of {KINDS}")
        if not self.temperature > 0:
            raise ParameterError("temperature must be > 0")
        if not self.beta >= 0:
            raise ParameterError("beta must be >= 0")


class InitStrategy:
    """Where the initial dictionary comes from.

    ``random`` draws Uniform(0, 1) entries from the caller's generator on
    every solve. ``fixed`` draws once from its own seed and then returns the
    same dictionary forever. ``warm_online`` starts like ``fixed`` and is
    moved towards solved dictionaries by :meth:`update`, which callers run
    between solves only.
    """

    def __init__(self, kind: str = "random", seed: int = 0, momentum: float = WARM_MOMENTUM):
        if kind not in ("random", "fixed", "warm_online"):
            raise ParameterError(f"unknown init strategy {kind!r}")
        self.kind = kind
        self.seed = seed
        self.momentum = momentum
        self.stored: np.ndarray | None = None

    def __repr__(self):
        return f"InitStrategy({self.kind!r}, seed={self.seed})"

    def dictionary(self, d: int, r: int, rng: np.random.Generator | None, batch=(), dtype=np.float64):
        if self.kind == "random":
            if rng is None:
                raise ParameterError("random initialization needs an rng")
            return rng.uniform(0.0, 1.0, size=(*batch, d, r)).astype(dtype)
        if self.stored is None or self.stored.shape != (d, r):
            from .matcore.rng import make_rng

            self.stored = make_rng(self.seed).uniform(0.0, 1.0, size=(d, r))
        return np.broadcast_to(self.stored, (*batch, d, r)).astype(dtype)

    def update(self, solved: np.ndarray) -> None:
        if self.kind != "warm_online":
            return
        solved = np.asarray(solved)
        if solved.ndim > 2:
            solved = solved.reshape(-1, *solved.shape[-2:]).mean(axis=0)
        self.stored = self.momentum * self.stored + (1.0 - self.momentum) * solved


@dataclass
class Factorization:
    dictionary: np.ndarray
    codes: np.ndarray
    reconstruction: np.ndarray
    objective_trace: list = field(default_factory=list)
    iterations_run: int = 0

    def dump(self, out_dir) -> None:
        """Write D.csv, C.csv and trace.csv (2-D factorizations only)."""
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_csv(out / "D.csv", self.dictionary)
        write_csv(out / "C.csv", self.codes)
        lines = ["iteration,objective"] + [f"{i},{v!r}" for i, v in enumerate(self.objective_trace, 1)]
        (out / "trace.csv").write_text("\n".join(lines) + "\n")


def _is_var(*xs) -> bool:
    return any(isinstance(x, Var) for x in xs)


def _out(as_var: bool, *vs):
    return vs if as_var else tuple(v.value for v in vs)


def _w(x) -> Var:
    return x if isinstance(x, Var) else tape.const(x)


def init_factorization(x, model: MdModel, strategy: InitStrategy, r: int, rng=None):
    """Initial (D, C) for ``x`` of shape (..., d, n)."""
    x = np.asarray(tape.value(x))
    if r < 1:
        raise ParameterError(f"r must be >= 1, got {r}")
    d, n = x.shape[-2:]
    if r > min(d, n):
        warnings.warn(f"r={r} exceeds min(d, n)={min(d, n)}", stacklevel=2)
    D = strategy.dictionary(d, r, rng, batch=x.shape[:-2], dtype=x.dtype)
    if model.kind == "cd":
        D = l2_normalize_columns(D)
    if model.kind == "nmf":
        C = column_softmax(cosine_similarity(D, x), NMF_INIT_TEMPERATURE)
    else:
        C = np.full((*x.shape[:-2], r, n), 1.0 / r, dtype=x.dtype)
    return D, C


def _vq(D: Var, X: Var, T: float):
    C = tape.softmax(tape.cosine(D, X), temperature=T)
    mass = tape.sum(C, axis=-1, keepdims=True)  # r x 1
    D_new = (X @ C.T) / (tape.transpose(mass) + EPS)
    return C, D_new


def vq_step(D, X, T: float = DEFAULT_TEMPERATURE):
    """One soft-VQ iteration; returns (C', D')."""
    return _out(_is_var(D, X), *_vq(_w(D), _w(X), T))


def _cd(D: Var, X: Var, T: float):
    C = tape.softmax(tape.cosine(D, X), temperature=T)
    # normalize() ignores a positive per-atom scale, so rescaling each row of C by its max
    # changes neither the value nor the gradient; it keeps near-dead atoms (mass ~1e-80
    # at low T) away from the zero-column guard
    peak = C.value.max(axis=-1, keepdims=True)
    scale = tape.const(1.0 / np.where(peak > 0, peak, 1.0))
    return C, tape.l2_normalize_columns(X @ (C * scale).T)


def cd_step(D, X, T: float = DEFAULT_TEMPERATURE):
    """One spherical K-means step with soft assignment; returns (C', D')."""
    return _out(_is_var(D, X), *_cd(_w(D), _w(X), T))


def _cd_codes(D: Var, X: Var, beta: float):
    r = D.value.shape[-1]
    gram = D.T @ D + beta * np.eye(r, dtype=D.value.dtype)
    cond = np.linalg.cond(gram.value)
    if not np.all(np.isfinite(cond)) or np.max(cond) > 1e12:
        raise NumericError(
            f"ridge system is singular or ill-conditioned (condition estimate {np.max(cond):.3e}, beta={beta})"
        )
    return tape.solve(gram, D.T @ X)


def cd_codes_closed_form(D, X, beta: float = DEFAULT_BETA):
    """Minimizer of ||X - DC||_F^2 + beta ||C||_F^2 over C."""
    if beta < 0:
        raise ParameterError("beta must be >= 0")
    return _out(_is_var(D, X), _cd_codes(_w(D), _w(X), beta))[0]


def _nmf(D: Var, C: Var, X: Var):
    C_new = C * (D.T @ X) / (D.T @ D @ C + EPS)
    D_new = D * (X @ C_new.T) / (D @ (C_new @ C_new.T) + EPS)
    return D_new, C_new


def _check_nonneg(*mats):
    for m in mats:
        if np.any(tape.value(m) < 0):
            raise DomainError("NMF multiplicative updates need nonnegative inputs (apply relu first)")


def nmf_mu_step(D, C, X):
    """One MU iteration (codes first with the old dictionary); returns (D', C')."""
    _check_nonneg(D, C, X)
    return _out(_is_var(D, C, X), *_nmf(_w(D), _w(C), _w(X)))


def objective(x, D, C, model: MdModel) -> float:
    x, D, C = (np.asarray(tape.value(m)) for m in (x, D, C))
    resid = x - D @ C
    if model.kind == "cd":
        return float((resid * resid).sum() + model.beta * (C * C).sum())
    return float(np.sqrt((resid * resid).sum()))


def spherical_kmeans_objective(x, D) -> float:
    """Sum over columns of the best cosine to any atom (hard argmax clusters)."""
    return float(cosine_similarity(np.asarray(D), np.asarray(x)).max(axis=-2).sum())


def soft_spherical_kmeans_objective(x, D, T: float = DEFAULT_TEMPERATURE) -> float:
    """Soft counterpart of :func:`spherical_kmeans_objective`: sum over columns of T*logsumexp(cos/T).

    Tends to the hard objective as T -> 0. On unit-norm columns one soft CD step
    never decreases it.
    """
    c = cosine_similarity(np.asarray(D), np.asarray(x)) / T
    m = c.max(axis=-2)
    return float(np.sum(T * (m + np.log(np.exp(c - m[..., None, :]).sum(axis=-2)))))


@dataclass
class Unrolled:
    """Result of an unrolled run; fields are tape values when the input was a ``Var``."""

    dictionary: object
    codes: object
    reconstruction: object
    objective_trace: list
    retained_iterates: int
    last_state: tuple = ()


def step_state(model: MdModel, state: tuple, X) -> tuple:
    """One solver step on the state (D, C). VQ and CD ignore the incoming C."""
    D, C = state
    if model.kind == "vq":
        C, D = _vq(D, X, model.temperature)
    elif model.kind == "cd":
        C, D = _cd(D, X, model.temperature)
    else:
        D, C = _nmf(D, C, X)
    return D, C


def output_map(model: MdModel, state: tuple, X):
    """Final (D, C, X_bar) from the last state; CD re-solves the codes in closed form."""
    D, C = state
    if model.kind == "cd":
        C = _cd_codes(D, X, model.beta)
    return D, C, D @ C


def unroll(x, model: MdModel, K: int, D0, C0, grad_mode: str = "bptt", terms: int = 1, trace: bool = True) -> Unrolled:
    """Run ``K`` solver steps from (D0, C0).

    ``grad_mode`` decides what stays on the tape when ``x`` is a ``Var``:
    ``bptt`` records every step; ``one-step`` runs the first ``K - terms``
    steps on a detached copy of ``x`` and only records the last ``terms``
    steps, whose incoming state is a constant. The initial state is always
    a constant.
    """
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    if grad_mode not in ("bptt", "one-step"):
        raise ParameterError(f"unroll supports 'bptt' and 'one-step', got {grad_mode!r}")
    if model.kind == "nmf":
        _check_nonneg(x, D0, C0)
    X = _w(x)
    X_const = tape.detach(X)
    state = (tape.const(D0), tape.const(C0))
    terms = min(max(terms, 1), K)
    recorded_from = 0 if grad_mode == "bptt" else K - terms
    objective_trace = []
    retained = 0
    for k in range(K):
        if k < recorded_from:
            state = step_state(model, state, X_const)
        else:
            state = step_state(model, state, X)
            retained += 1
        if trace:
            objective_trace.append(_batch_objective(X.value, state[0].value, state[1].value, model))
    D, C, Xbar = output_map(model, state, X)
    if not isinstance(x, Var):
        D, C, Xbar = D.value, C.value, Xbar.value
    return Unrolled(D, C, Xbar, objective_trace, retained, state)


def _batch_objective(x, D, C, model) -> float:
    if x.ndim == 2:
        return objective(x, D, C, model)
    flat = zip(x.reshape(-1, *x.shape[-2:]), D.reshape(-1, *D.shape[-2:]), C.reshape(-1, *C.shape[-2:]))
    return float(np.mean([objective(a, b, c, model) for a, b, c in flat]))


def solve(x, model: MdModel, K: int = DEFAULT_K, strategy: InitStrategy | None = None, rng=None,
          r: int = DEFAULT_R) -> Factorization:
    """Factorize ``x`` (d x n, or a stack) with ``K`` unrolled steps."""
    x = np.asarray(x)
    if x.ndim < 2:
        raise ShapeError(f"solve expects a matrix, got shape {x.shape}")
    if model.kind == "nmf" and np.any(x < 0):
        raise DomainError("NMF needs nonnegative input (apply relu first)")
    strategy = strategy or InitStrategy("random")
    D0, C0 = init_factorization(x, model, strategy, r, rng)
    run = unroll(x, model, K, D0, C0)
    return Factorization(run.dictionary, run.codes, run.reconstruction, run.objective_trace, K)
