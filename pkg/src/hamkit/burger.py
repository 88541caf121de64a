"""The Hamburger context block and the dot-product self-attention baseline.

Both blocks map a (d_z x n) feature matrix (or a stack of them) to the same
shape: ``Y = Z + BN(context(Z))``. Tokens / hyper-pixels are columns.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import graddiff, mdsolve
from .matcore import BatchNormState, ParameterError, ShapeError, tape
from .matcore.tape import Var
from .mdsolve import DomainError, InitStrategy, MdModel

HAM_OVERRIDES = (None, "identity", "zero")


@dataclass
class HamburgerConfig:
    d_z: int
    d: int
    r: int
    K: int = mdsolve.DEFAULT_K
    model: MdModel = field(default_factory=lambda: MdModel("nmf"))
    grad_mode: str = "one-step"
    init: InitStrategy = field(default_factory=InitStrategy)
    use_relu_pre_ham: bool = True
    lower_bread: bool = True
    upper_bread: bool = True
    terms: int = 1
    ham_override: str | None = None  # test hook: replace the solver by identity / zero

    def __post_init__(self):
        if self.model.kind == "nmf":
            self.use_relu_pre_ham = True
        if self.grad_mode not in graddiff.GRAD_MODES:
            raise ParameterError(
                f"unknown grad_mode {self.grad_mode!r}; expected one of {', '.join(graddiff.GRAD_MODES)}")
        if self.ham_override not in HAM_OVERRIDES:
            raise ParameterError(f"ham_override must be one of {HAM_OVERRIDES}")
        if (not self.lower_bread or not self.upper_bread) and self.d != self.d_z:
            raise ParameterError("disabling a bread layer requires d == d_z")
        if min(self.d_z, self.d, self.r, self.K) < 1:
            raise ParameterError("d_z, d, r and K must all be >= 1")

    @classmethod
    def from_r(cls, r: int, d_z: int, **kw) -> "HamburgerConfig":
        """Latent width defaults to 8r."""
        return cls(d_z=d_z, d=8 * r, r=r, **kw)


@dataclass
class HamburgerParams:
    W_l: np.ndarray  # d x d_z
    W_u: np.ndarray  # d_z x d
    bn: BatchNormState

    @classmethod
    def init(cls, config: HamburgerConfig, rng: np.random.Generator) -> "HamburgerParams":
        d, d_z = config.d, config.d_z
        W_l = rng.normal(0.0, np.sqrt(2.0 / d_z), size=(d, d_z))
        W_u = rng.normal(0.0, np.sqrt(1.0 / d), size=(d_z, d))
        return cls(W_l, W_u, BatchNormState.create(d_z))

    def arrays(self) -> dict:
        return {"W_l": self.W_l, "W_u": self.W_u, "bn_gamma": self.bn.gamma, "bn_beta": self.bn.beta}

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays().values()))


def hamburger_param_count(d_z: int, d: int) -> int:
    return 2 * d_z * d + 2 * d_z


@dataclass
class AttentionParams:
    W_q: np.ndarray
    W_k: np.ndarray
    W_v: np.ndarray
    W_o: np.ndarray
    bn: BatchNormState | None = None

    @classmethod
    def init(cls, d: int, rng: np.random.Generator, with_bn: bool = True) -> "AttentionParams":
        mats = [rng.normal(0.0, np.sqrt(1.0 / d), size=(d, d)) for _ in range(4)]
        return cls(*mats, BatchNormState.create(d) if with_bn else None)

    def arrays(self) -> dict:
        out = {"W_q": self.W_q, "W_k": self.W_k, "W_v": self.W_v, "W_o": self.W_o}
        if self.bn is not None:
            out.update(bn_gamma=self.bn.gamma, bn_beta=self.bn.beta)
        return out

    def count(self) -> int:
        """Projection weights only (4 d^2); the shared BN wrapper is not counted."""
        return int(sum(a.size for a in (self.W_q, self.W_k, self.W_v, self.W_o)))


def attention_param_count(d: int) -> int:
    return 4 * d * d


# ---------------------------------------------------------------- tape-level blocks

def ham_apply(X: Var, config: HamburgerConfig, rng, init_state=None) -> tuple[Var, dict]:
    """The ham on the tape: returns X_bar and solver details.

    ``init_state`` pins (D0, C0); otherwise it is drawn from ``config.init``.
    The initial state is never differentiated.
    """
    if config.ham_override == "identity":
        return X, {}
    if config.ham_override == "zero":
        return X * 0.0, {}
    if config.model.kind == "nmf" and np.any(X.value < 0):
        raise DomainError("NMF ham received negative input; enable use_relu_pre_ham")
    if init_state is None:
        D0, C0 = mdsolve.init_factorization(X.value, config.model, config.init, config.r, rng)
    else:
        D0, C0 = init_state
    if config.grad_mode == "implicit":
        Xbar = graddiff.implicit_solve_node(X, config.model, D0, C0)
        return Xbar, {"init_state": (D0, C0), "retained_iterates": 1}
    run = mdsolve.unroll(X, config.model, config.K, D0, C0, grad_mode=config.grad_mode,
                         terms=config.terms, trace=False)
    return run.reconstruction, {"init_state": (D0, C0), "D": tape.value(run.dictionary),
                                "retained_iterates": run.retained_iterates}


def hamburger_apply(Z: Var, pv: dict, params: HamburgerParams, config: HamburgerConfig, rng, init_state=None):
    """Y = Z + BN(W_u M(W_l Z)) with parameter Vars in ``pv``; returns (Y, intermediates)."""
    if Z.value.shape[-2] != config.d_z:
        raise ShapeError(f"expected {config.d_z} input channels, got {Z.value.shape[-2]}")
    X = tape.matmul(pv["W_l"], Z) if config.lower_bread else Z
    if config.use_relu_pre_ham:
        X = tape.relu(X)
    Xbar, info = ham_apply(X, config, rng, init_state)
    H = tape.matmul(pv["W_u"], Xbar) if config.upper_bread else Xbar
    Y = Z + tape.batchnorm(H, pv["bn_gamma"], pv["bn_beta"], params.bn)
    return Y, {"X": X, "Xbar": Xbar, "H": H, **info}


def attention_apply(Z: Var, pv: dict, params: AttentionParams):
    d = params.W_q.shape[0]
    if Z.value.shape[-2] != d:
        raise ShapeError(f"expected {d} input channels, got {Z.value.shape[-2]}")
    Q = tape.matmul(pv["W_q"], Z)
    Kt = tape.matmul(pv["W_k"], Z)
    V = tape.matmul(pv["W_v"], Z)
    S = tape.matmul(tape.transpose(Q), Kt) * (1.0 / np.sqrt(d))  # n x n, row i = query i
    A = tape.softmax(S, axis=-1)
    O = tape.matmul(V, tape.transpose(A))
    H = tape.matmul(pv["W_o"], O)
    if params.bn is not None:
        H = tape.batchnorm(H, pv["bn_gamma"], pv["bn_beta"], params.bn)
    return Z + H, {"A": A, "H": H}


# ---------------------------------------------------------------- standalone forward/backward

@dataclass
class BlockCache:
    kind: str
    Z: Var
    Y: Var
    leaves: dict
    parts: dict
    grad_mode: str | None = None


def _leaves(arrays: dict) -> dict:
    return {k: tape.leaf(v, name=k) for k, v in arrays.items()}


def hamburger_forward(z, params: HamburgerParams, config: HamburgerConfig, rng=None, init_state=None):
    Z = tape.leaf(np.asarray(z, dtype=np.float64), name="Z")
    pv = _leaves(params.arrays())
    Y, parts = hamburger_apply(Z, pv, params, config, rng, init_state)
    return Y.value, BlockCache("hamburger", Z, Y, pv, parts, config.grad_mode)


def hamburger_backward(grad_y, cache: BlockCache, config: HamburgerConfig | None = None):
    """Returns (grad_z, {parameter name: gradient})."""
    if cache.kind != "hamburger":
        raise RuntimeError(f"hamburger_backward got a {cache.kind} cache")
    if config is not None and config.grad_mode != cache.grad_mode:
        raise RuntimeError(f"cache recorded with {cache.grad_mode!r}, config asks for {config.grad_mode!r}")
    names = list(cache.leaves)
    grads = tape.grad(cache.Y, grad_y, [cache.Z] + [cache.leaves[n] for n in names])
    return grads[0], dict(zip(names, grads[1:]))


def attention_forward(z, params: AttentionParams):
    Z = tape.leaf(np.asarray(z, dtype=np.float64), name="Z")
    pv = _leaves(params.arrays())
    Y, parts = attention_apply(Z, pv, params)
    return Y.value, BlockCache("attention", Z, Y, pv, parts)


def attention_backward(grad_y, cache: BlockCache):
    """Returns (grad_z, {parameter name: gradient})."""
    if cache.kind != "attention":
        raise RuntimeError(f"attention_backward got a {cache.kind} cache")
    names = list(cache.leaves)
    grads = tape.grad(cache.Y, grad_y, [cache.Z] + [cache.leaves[n] for n in names])
    return grads[0], dict(zip(names, grads[1:]))
