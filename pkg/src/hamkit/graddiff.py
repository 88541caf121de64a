"""Gradients through unrolled solvers and the abstract iterate model h <- F(h, x), y = G(h, x).

Three strategies are provided:

* ``bptt``: reverse sweep over every recorded step.
* ``one-step``: only the last step is recorded; its incoming state is a
  constant, so memory does not grow with the number of iterations.
* ``implicit``: the fixed-point gradient dG/dx + dG/dh (I - dF/dh)^-1 dF/dx,
  with the adjoint system solved by fixed-point iteration.

The initial state h^0 is never differentiated; finite-difference oracles hold
it fixed as well.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import mdsolve
from .matcore import NumericError, ParameterError, make_rng, tape
from .matcore.tape import Var
from .mdsolve import MdModel

GRAD_MODES = ("bptt", "one-step", "implicit")
FD_STEP = 1e-6
ADJOINT_MAX_ITER = 500


@dataclass
class GradReport:
    mode: str
    gradients: dict
    oracle_max_rel_error: float = float("nan")
    oracle_cosine: float = float("nan")
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        for name, g in self.gradients.items():
            if not np.all(np.isfinite(g)):
                raise NumericError(f"non-finite gradient for {name!r}")

    def to_dict(self) -> dict:
        out = {
            "mode": self.mode,
            "gradient_norms": {k: float(np.linalg.norm(v)) for k, v in sorted(self.gradients.items())},
            "oracle_max_rel_error": _json_float(self.oracle_max_rel_error),
            "oracle_cosine": _json_float(self.oracle_cosine),
        }
        out.update({k: _json_float(v) if isinstance(v, float) else v for k, v in self.extras.items()})
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def _json_float(v):
    v = float(v)
    return v if np.isfinite(v) else None


def max_rel_error(g: np.ndarray, ref: np.ndarray) -> float:
    """Largest absolute deviation, relative to the largest oracle entry."""
    scale = max(float(np.max(np.abs(ref))), 1e-12)
    return float(np.max(np.abs(g - ref))) / scale


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 1.0 if na == nb else 0.0
    return float(np.clip(np.vdot(a, b) / (na * nb), -1.0, 1.0))


# ---------------------------------------------------------------- oracles

def finite_difference_jacobian(f, x: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Central-difference Jacobian, shape (f(x).size, x.size)."""
    if not step > 0:
        raise ParameterError("finite-difference step must be > 0")
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for i in range(x.size):
        e = np.zeros(x.size)
        e[i] = step
        e = e.reshape(x.shape)
        hi = np.asarray(f(x + e), dtype=np.float64)
        lo = np.asarray(f(x - e), dtype=np.float64)
        if not (np.all(np.isfinite(hi)) and np.all(np.isfinite(lo))):
            raise NumericError(f"non-finite function value while differencing coordinate {i}")
        cols.append(((hi - lo) / (2 * step)).ravel())
    return np.stack(cols, axis=1)


def finite_difference_vjp(f, x: np.ndarray, grad_out: np.ndarray, step: float = FD_STEP) -> np.ndarray:
    """Gradient of <grad_out, f(x)> by central differences."""
    g = np.asarray(grad_out, dtype=np.float64)
    return (g.ravel() @ finite_difference_jacobian(f, x, step)).reshape(np.shape(x))


# ---------------------------------------------------------------- solver tapes

@dataclass
class SolverTape:
    """A recorded solve of ``x`` from a frozen initial state."""

    model: MdModel
    K: int
    mode: str
    x: Var
    D0: np.ndarray
    C0: np.ndarray
    output: Var
    run: mdsolve.Unrolled
    terms: int = 1

    @property
    def retained_iterates(self) -> int:
        return self.run.retained_iterates


def record_solve(x: np.ndarray, model: MdModel, K: int, D0, C0, mode: str = "bptt", terms: int = 1) -> SolverTape:
    """Solve with ``x`` on the tape. ``mode`` is ``bptt`` or ``one-step``."""
    xv = tape.leaf(np.asarray(x, dtype=np.float64), name="x")
    run = mdsolve.unroll(xv, model, K, D0, C0, grad_mode=mode, terms=terms, trace=False)
    return SolverTape(model, K, mode, xv, np.asarray(D0), np.asarray(C0), run.reconstruction, run, terms)


def solve_map(model: MdModel, K: int, D0, C0):
    """The K-step solve as a plain function of x (initial state held fixed)."""
    def f(x):
        return mdsolve.unroll(np.asarray(x), model, K, D0, C0, trace=False).reconstruction
    return f


def backward_bptt(solver_tape: SolverTape | None, grad_out) -> GradReport:
    if solver_tape is None or solver_tape.mode != "bptt":
        raise RuntimeError("backward_bptt needs a tape recorded with mode='bptt'")
    (gx,) = tape.grad(solver_tape.output, grad_out, [solver_tape.x])
    return GradReport("bptt", {"x": gx}, extras={"retained_iterates": solver_tape.retained_iterates})


def backward_one_step(solver_tape: SolverTape, grad_out) -> GradReport:
    if solver_tape is None or solver_tape.mode != "one-step":
        raise RuntimeError("backward_one_step needs a tape recorded with mode='one-step'")
    (gx,) = tape.grad(solver_tape.output, grad_out, [solver_tape.x])
    return GradReport("one-step", {"x": gx}, extras={
        "retained_iterates": solver_tape.retained_iterates, "terms": solver_tape.terms})


# ---------------------------------------------------------------- implicit gradient

def implicit_vjp(F, G, h_star, x: np.ndarray, grad_out, tol: float = 1e-10, max_iter: int = ADJOINT_MAX_ITER):
    """Fixed-point gradient of y = G(h*, x) where h* = F(h*, x).

    ``F(h_vars, x_var)`` returns a tuple like ``h_vars``; ``G(h_vars, x_var)``
    returns one ``Var``. The adjoint w = dG/dh^T g + dF/dh^T w is iterated
    until the update falls below ``tol`` relative to ``w``. Returns the
    gradient and the number of adjoint iterations.
    """
    h = tuple(tape.leaf(np.asarray(v, dtype=np.float64)) for v in h_star)
    xv = tape.leaf(np.asarray(x, dtype=np.float64))
    y = G(h, xv)
    h_next = F(h, xv)
    *g_h, g_x = tape.grad(y, grad_out, [*h, xv])
    w = [gi.copy() for gi in g_h]
    for it in range(1, max_iter + 1):
        jw = tape.grad(list(h_next), w, list(h))
        w_new = [a + b for a, b in zip(g_h, jw)]
        delta = np.sqrt(sum(float(np.sum((a - b) ** 2)) for a, b in zip(w_new, w)))
        size = np.sqrt(sum(float(np.sum(a * a)) for a in w_new))
        w = w_new
        if not np.isfinite(size) or size > 1e12:
            raise NumericError(f"adjoint iteration diverged after {it} iterations (|w| = {size:.3e})")
        if delta <= tol * max(size, 1e-300):
            (gx_f,) = tape.grad(list(h_next), w, [xv])
            return g_x + gx_f, it
    raise NumericError(
        f"adjoint iteration did not converge within {max_iter} iterations "
        f"(last relative update {delta / max(size, 1e-300):.3e}); dF/dh is not contractive"
    )


def md_fixed_point(x, model: MdModel, D0, C0, max_steps: int = 5000, rtol: float = 1e-6):
    """Iterate the solver until ||h^k - h^{k-1}|| / ||h^k|| < rtol."""
    state = (tape.const(D0), tape.const(C0))
    X = tape.const(np.asarray(x))
    for k in range(1, max_steps + 1):
        new = mdsolve.step_state(model, state, X)
        num = sum(float(np.sum((a.value - b.value) ** 2)) for a, b in zip(new, state))
        den = sum(float(np.sum(a.value ** 2)) for a in new)
        state = new
        if np.sqrt(num) <= rtol * np.sqrt(den):
            return tuple(s.value for s in state), k
    raise NumericError(f"solver did not reach relative change {rtol} within {max_steps} steps")


def backward_implicit(x, fixed_point_state, grad_out, model: MdModel, linear_solver_tol: float = 1e-10) -> GradReport:
    """Implicit gradient of the solver output at a (near) fixed point ``fixed_point_state`` = (D*, C*)."""
    def F(h, xv):
        return mdsolve.step_state(model, h, xv)

    def G(h, xv):
        return mdsolve.output_map(model, h, xv)[2]

    gx, iters = implicit_vjp(F, G, fixed_point_state, x, grad_out, tol=linear_solver_tol)
    return GradReport("implicit", {"x": gx}, extras={"adjoint_iterations": iters, "retained_iterates": 1})


def md_gradient(x, model: MdModel, K: int, D0, C0, grad_out, mode: str = "bptt", terms: int = 1) -> GradReport:
    """Gradient of <grad_out, X_bar(x)> under ``mode``."""
    if mode == "bptt":
        return backward_bptt(record_solve(x, model, K, D0, C0, "bptt"), grad_out)
    if mode == "one-step":
        return backward_one_step(record_solve(x, model, K, D0, C0, "one-step", terms), grad_out)
    if mode == "implicit":
        h_star, _ = md_fixed_point(x, model, D0, C0)
        return backward_implicit(x, h_star, grad_out, model)
    raise ParameterError(f"unknown gradient mode {mode!r}; expected one of {GRAD_MODES}")


def random_instance(model: MdModel, d: int, n: int, r: int, seed: int, strategy=None):
    """A seeded (x, D0, C0, grad_out) tuple for gradient checks."""
    rng = make_rng(seed)
    x = rng.uniform(0.0, 1.0, size=(d, n)) if model.kind == "nmf" else rng.normal(size=(d, n))
    D0, C0 = mdsolve.init_factorization(x, model, strategy or mdsolve.InitStrategy("random"), r, rng)
    grad_out = rng.normal(size=(d, n))
    return x, D0, C0, grad_out


def grad_check(model: MdModel, mode: str = "bptt", d: int = 6, n: int = 10, r: int = 3, K: int = 3,
               seed: int = 0, terms: int = 1, step: float = FD_STEP, long_unroll: int = 200) -> GradReport:
    """Compare ``mode`` with its oracle and, for one-step, report the delta to BPTT.

    BPTT and one-step are checked against central differences of the K-step
    solve; implicit against BPTT with ``long_unroll`` steps.
    """
    x, D0, C0, g = random_instance(model, d, n, r, seed)
    rep = md_gradient(x, model, K, D0, C0, g, mode, terms)
    gx = rep.gradients["x"]
    if mode == "implicit":
        # the implicit gradient targets the infinite unroll, so the oracle is a long BPTT run
        ref = md_gradient(x, model, long_unroll, D0, C0, g, "bptt").gradients["x"]
        rep.extras.update(oracle="bptt", oracle_K=long_unroll)
    else:
        ref = finite_difference_vjp(solve_map(model, K, D0, C0), x, g, step)
        rep.extras["oracle"] = "central-difference"
    rep.oracle_max_rel_error = max_rel_error(gx, ref)
    rep.oracle_cosine = cosine(gx, ref)
    if mode == "one-step":
        bp = md_gradient(x, model, K, D0, C0, g, "bptt").gradients["x"]
        rep.extras["bptt_max_rel_delta"] = max_rel_error(gx, bp)
        rep.extras["bptt_cosine"] = cosine(gx, bp)
    rep.extras.update({"ham": model.kind, "K": K, "d": d, "n": n, "r": r, "seed": seed})
    return rep


# ---------------------------------------------------------------- contraction probes

@dataclass
class IterateMap:
    """A designed map h <- F(h, x), y = G(h) with known Lipschitz constants."""

    name: str
    F: object
    G: object
    L_h: float
    L_x: float
    L_G: float
    dim: int


def affine_probe(L_h: float = 0.5, dim: int = 4) -> IterateMap:
    """F(h, x) = L_h h + x, G = identity."""
    return IterateMap(f"affine({L_h})", lambda h, x: L_h * h + x, lambda h: h, abs(L_h), 1.0, 1.0, dim)


def linear_probe(A: np.ndarray, B: np.ndarray) -> IterateMap:
    A, B = np.asarray(A, float), np.asarray(B, float)
    return IterateMap("linear", lambda h, x: tape.matmul(A, h) + tape.matmul(B, x), lambda h: h,
                      float(np.linalg.norm(A, 2)), float(np.linalg.norm(B, 2)), 1.0, A.shape[0])


def tanh_probe(L_h: float = 0.8, dim: int = 6, seed: int = 0) -> IterateMap:
    """F(h, x) = tanh(W h + U x) with ||W||_2 = L_h, y = P h."""
    rng = make_rng(seed)
    W = rng.normal(size=(dim, dim))
    W *= L_h / np.linalg.norm(W, 2)
    U = rng.normal(size=(dim, dim)) / np.sqrt(dim)
    P = rng.normal(size=(dim, dim)) / np.sqrt(dim)
    return IterateMap(
        f"tanh({L_h})", lambda h, x: tape.tanh(tape.matmul(W, h) + tape.matmul(U, x)),
        lambda h: tape.matmul(P, h), float(np.linalg.norm(W, 2)), float(np.linalg.norm(U, 2)),
        float(np.linalg.norm(P, 2)), dim,
    )


def _col(v) -> np.ndarray:
    return np.asarray(v, dtype=np.float64).reshape(-1, 1)


def iterate(probe: IterateMap, h0, x, t: int):
    h = tape.const(_col(h0))
    xv = tape.const(_col(x))
    out = [h.value]
    for _ in range(t):
        h = probe.F(h, xv)
        if not np.all(np.isfinite(h.value)) or np.linalg.norm(h.value) > 1e12:
            raise NumericError(f"iteration diverged (|h| > 1e12) after {len(out)} steps")
        out.append(h.value)
    return out


def unrolled_jacobians(probe: IterateMap, h0, x, t: int):
    """Jacobians dy/dh0 and dy/dx of the t-step unroll, by reverse sweeps (one per output unit)."""
    h0v = tape.leaf(_col(h0))
    xv = tape.leaf(_col(x))
    h = h0v
    for _ in range(t):
        h = probe.F(h, xv)
    y = probe.G(h)
    m = y.value.size
    rows_h, rows_x = [], []
    for i in range(m):
        e = np.zeros(m)
        e[i] = 1.0
        gh, gx = tape.grad(y, e.reshape(y.value.shape), [h0v, xv])
        rows_h.append(gh.ravel())
        rows_x.append(gx.ravel())
    return np.array(rows_h), np.array(rows_x)


def probe_fixed_point(probe: IterateMap, x, h0=None, max_steps: int = 100000, tol: float = 1e-15):
    h = tape.const(np.zeros((probe.dim, 1)) if h0 is None else _col(h0))
    xv = tape.const(_col(x))
    for _ in range(max_steps):
        nxt = probe.F(h, xv)
        if not np.all(np.isfinite(nxt.value)) or np.linalg.norm(nxt.value) > 1e12:
            raise NumericError("iteration diverged (|h| > 1e12) while seeking the fixed point")
        if np.linalg.norm(nxt.value - h.value) <= tol * max(1.0, np.linalg.norm(nxt.value)):
            return nxt.value
        h = nxt
    raise NumericError(f"no fixed point within {max_steps} steps")


def probe_implicit_gradient(probe: IterateMap, x, grad_out, tol: float = 1e-12) -> GradReport:
    h_star = probe_fixed_point(probe, x)
    gx, iters = implicit_vjp(lambda h, xv: (probe.F(h[0], xv),), lambda h, xv: probe.G(h[0]),
                             (h_star,), _col(x), _col(grad_out), tol=tol)
    return GradReport("implicit", {"x": gx.ravel()}, extras={"adjoint_iterations": iters, "probe": probe.name})


def probe_bptt_gradient(probe: IterateMap, h0, x, grad_out, t: int) -> GradReport:
    xv = tape.leaf(_col(x))
    h = tape.const(_col(h0))
    for _ in range(t):
        h = probe.F(h, xv)
    (gx,) = tape.grad(probe.G(h), _col(grad_out), [xv])
    return GradReport("bptt", {"x": gx.ravel()}, extras={"K": t, "probe": probe.name})


@dataclass
class ContractionProbe:
    probe: str
    L_h: float
    L_x: float
    L_G: float
    convergence_slope: float
    errors: list
    grad_h0_norms: list
    grad_x_norms: list
    prop1_holds: bool
    prop3_h0_holds: bool
    prop3_x_holds: bool
    grad_x_norm: float
    grad_x_limit_bound: float

    @property
    def grad_x_bound_holds(self) -> bool:
        return self.grad_x_norm <= self.grad_x_limit_bound * 1.05

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["grad_x_bound_holds"] = self.grad_x_bound_holds
        return d


def probe_contraction(probe: IterateMap, x=None, t_max: int = 100, h0=None, seed: int = 0) -> ContractionProbe:
    """Empirical check of linear convergence and of the gradient bounds of the iterate model."""
    rng = make_rng(seed)
    x = rng.normal(size=probe.dim) if x is None else np.asarray(x, float)
    h0 = rng.normal(size=probe.dim) if h0 is None else np.asarray(h0, float)
    hs = iterate(probe, h0, x, t_max)
    h_star = probe_fixed_point(probe, x, h0)
    errors = [float(np.linalg.norm(h - h_star)) for h in hs]  # hs are columns
    floor = 1e-12 * max(errors[0], 1e-300)
    ts = [t for t, e in enumerate(errors) if e > floor and e > 1e-13]
    if len(ts) >= 2:
        slope = float(np.polyfit(ts, np.log([errors[t] for t in ts]), 1)[0])
    else:
        slope = float("-inf")
    prop1 = all(errors[t + 1] <= probe.L_h * errors[t] * (1 + 1e-9) + 1e-13 for t in range(t_max))
    gh_norms, gx_norms = [], []
    prop3_h0 = prop3_x = True
    for t in range(1, t_max + 1):
        jh, jx = unrolled_jacobians(probe, h0, x, t)
        nh, nx = float(np.linalg.norm(jh, 2)), float(np.linalg.norm(jx, 2))
        gh_norms.append(nh)
        gx_norms.append(nx)
        prop3_h0 &= nh <= probe.L_G * probe.L_h ** t * (1 + 1e-9) + 1e-15
        bound = probe.L_G * probe.L_x * (1 - probe.L_h ** t) / (1 - probe.L_h)
        prop3_x &= nx <= bound * (1 + 1e-9) + 1e-15
    limit = probe.L_G * probe.L_x / (1 - probe.L_h)
    return ContractionProbe(probe.name, probe.L_h, probe.L_x, probe.L_G, slope, errors, gh_norms, gx_norms,
                            bool(prop1), bool(prop3_h0), bool(prop3_x), gx_norms[-1], limit)


def implicit_solve_node(X: Var, model: MdModel, D0, C0, max_steps: int = 5000, rtol: float = 1e-6,
                        tol: float = 1e-10) -> Var:
    """Solver output as a tape node whose backward pass is the implicit gradient."""
    xval = X.value
    if xval.ndim == 2:
        h_star, _ = md_fixed_point(xval, model, D0, C0, max_steps, rtol)
        out = mdsolve.output_map(model, tuple(tape.const(v) for v in h_star), tape.const(xval))[2].value
        stars = [h_star]
    else:
        stars, outs = [], []
        for xi, di, ci in zip(xval, D0, C0):
            h_star, _ = md_fixed_point(xi, model, di, ci, max_steps, rtol)
            stars.append(h_star)
            outs.append(mdsolve.output_map(model, tuple(tape.const(v) for v in h_star), tape.const(xi))[2].value)
        out = np.stack(outs)

    def F(h, xv):
        return mdsolve.step_state(model, h, xv)

    def G(h, xv):
        return mdsolve.output_map(model, h, xv)[2]

    def vjp(g):
        if xval.ndim == 2:
            return (implicit_vjp(F, G, stars[0], xval, g, tol)[0],)
        return (np.stack([implicit_vjp(F, G, s, xi, gi, tol)[0] for s, xi, gi in zip(stars, xval, g)]),)

    return Var(out, (X,), vjp, X.requires_grad)
