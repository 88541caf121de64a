"""Spectrum concentration, analytic parameter/MAC counts, and forward-pass timing."""
from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from . import burger
from .burger import AttentionParams, HamburgerConfig, HamburgerParams
from .matcore import ParameterError, ShapeError, make_rng, singular_values, tape
from .mdsolve import InitStrategy, MdModel

# ---------------------------------------------------------------- spectrum


def accumulative_ratio(sigma: np.ndarray) -> np.ndarray:
    """sum_{i<=r} sigma_i^2 / sum_i sigma_i^2 for r = 1..len(sigma)."""
    e = np.asarray(sigma, dtype=np.float64) ** 2
    total = e.sum()
    if total == 0:
        return np.ones_like(e)
    ratio = np.cumsum(e) / total
    ratio[-1] = 1.0
    return np.minimum(ratio, 1.0)


@dataclass
class SpectrumReport:
    sigma_before: np.ndarray
    sigma_after: np.ndarray
    ratio_before: np.ndarray
    ratio_after: np.ndarray

    def ratio_at(self, r: int, which: str = "after") -> float:
        curve = self.ratio_after if which == "after" else self.ratio_before
        return float(curve[r - 1])

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("index,sigma_before,sigma_after,ratio_before,ratio_after\n")
        for i, row in enumerate(zip(self.sigma_before, self.sigma_after, self.ratio_before, self.ratio_after), 1):
            buf.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()


def spectrum_report(before: np.ndarray, after: np.ndarray) -> SpectrumReport:
    before, after = np.asarray(before, float), np.asarray(after, float)
    if before.shape != after.shape:
        raise ShapeError(f"spectrum_report needs equal shapes, got {before.shape} and {after.shape}")
    sb, sa = singular_values(before), singular_values(after)
    return SpectrumReport(sb, sa, accumulative_ratio(sb), accumulative_ratio(sa))


# ---------------------------------------------------------------- cost model

@dataclass
class CostReport:
    module: str
    params: int
    macs: int
    breakdown: dict = field(default_factory=dict)
    param_breakdown: dict = field(default_factory=dict)
    shape: tuple = ()

    def __post_init__(self):
        if sum(self.breakdown.values()) != self.macs:
            raise ValueError("MAC breakdown does not sum to the total")

    def to_dict(self) -> dict:
        return {
            "module": self.module,
            "shape": list(self.shape),
            "params": self.params,
            "macs": self.macs,
            "breakdown": dict(self.breakdown),
            "param_breakdown": dict(self.param_breakdown),
        }


BLOCK_NAMES = ("sa", "ham-vq", "ham-cd", "ham-nmf")


def _ham_macs(kind: str, n: int, d_z: int, d: int, r: int, K: int) -> dict:
    """MACs of one Hamburger forward. Softmax, norms, BN and elementwise work are not counted."""
    b = {"lower_bread": n * d_z * d}
    if kind == "nmf":
        b["init_codes"] = n * d * r  # D^T X for the cosine initialization of C
        b["steps_ndr"] = K * 2 * n * d * r  # D^T X, X C^T
        b["steps_nr2"] = K * 2 * n * r * r  # (D^T D) C, C C^T
        b["steps_dr2"] = K * 2 * d * r * r  # D^T D, D (C C^T)
    else:
        b["steps_ndr"] = K * 2 * n * d * r  # D^T X (cosine), X C^T
        if kind == "cd":
            b["codes_gram"] = d * r * r
            b["codes_rhs"] = n * d * r
            b["codes_solve"] = r ** 3 // 3 + n * r * r  # Cholesky factor + two triangular solves
    b["reconstruction"] = n * d * r
    b["upper_bread"] = n * d * d_z
    return b


def cost_report(block: str, shape, d: int | None = None, r: int = 64, K: int = 6) -> CostReport:
    """Analytic cost of one forward pass on a (c, h, w) input; one MAC = one multiply-accumulate."""
    c, h, w = (int(v) for v in shape)
    n = h * w
    if block in ("sa", "self_attention"):
        breakdown = {
            "q_proj": n * c * c, "k_proj": n * c * c, "v_proj": n * c * c,
            "scores": n * n * c, "weighted_sum": n * n * c, "out_proj": n * c * c,
        }
        pb = {"W_q": c * c, "W_k": c * c, "W_v": c * c, "W_o": c * c}
        return CostReport("sa", sum(pb.values()), sum(breakdown.values()), breakdown, pb, (c, h, w))
    if block.startswith("ham"):
        kind = block.split("-", 1)[1] if "-" in block else "nmf"
        if kind not in ("vq", "cd", "nmf"):
            raise ParameterError(f"unknown ham {kind!r}")
        d = c if d is None else d
        breakdown = _ham_macs(kind, n, c, d, r, K)
        pb = {"W_l": d * c, "W_u": c * d, "bn_affine": 2 * c}
        return CostReport(f"ham-{kind}", sum(pb.values()), sum(breakdown.values()), breakdown, pb, (c, h, w))
    raise ParameterError(f"unknown block {block!r}; expected one of {BLOCK_NAMES}")


# ---------------------------------------------------------------- timing

def _forward_fn(block: str, shape, r: int = 8, K: int = 6, seed: int = 0, dtype=np.float64):
    c, h, w = shape
    n = h * w
    rng = make_rng(seed)
    z = rng.normal(size=(c, n)).astype(dtype)
    if block == "sa":
        params = AttentionParams.init(c, rng)
        params.bn.mode = "eval"
        pv = {k: tape.const(v.astype(dtype)) for k, v in params.arrays().items()}
        return lambda: burger.attention_apply(tape.const(z), pv, params)[0].value
    if block.startswith("ham"):
        kind = block.split("-", 1)[1]
        cfg = HamburgerConfig(d_z=c, d=c, r=r, K=K, model=MdModel(kind), init=InitStrategy("fixed", seed))
        params = HamburgerParams.init(cfg, rng)
        params.bn.mode = "eval"
        pv = {k: tape.const(v.astype(dtype)) for k, v in params.arrays().items()}
        return lambda: burger.hamburger_apply(tape.const(z), pv, params, cfg, None)[0].value
    raise ParameterError(f"unknown block {block!r}; expected one of {BLOCK_NAMES}")


def bench_forward(block: str, shape, repeats: int = 20, warmup: int = 2, r: int = 8, K: int = 6) -> dict:
    """Wall-clock seconds of one forward pass on this machine: raw samples, median and IQR."""
    if repeats < 5:
        raise ParameterError("repeats must be >= 5")
    fn = _forward_fn(block, tuple(int(v) for v in shape), r=r, K=K)
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    q1, med, q3 = np.percentile(samples, [25, 50, 75])
    return {"block": block, "shape": list(shape), "samples": samples, "median": float(med), "iqr": float(q3 - q1)}


def scaling_table(block: str, channels: int, ns, repeats: int = 20, r: int = 8, K: int = 6,
                  warmup: int = 2) -> list:
    """Median forward time per token count n (grid 1 x n) plus the ratio to the previous size.

    Repeats are interleaved across sizes, so slow drift in machine load hits
    every n alike instead of skewing one ratio.
    """
    if repeats < 5:
        raise ParameterError("repeats must be >= 5")
    fns = [_forward_fn(block, (channels, 1, int(n)), r=r, K=K) for n in ns]
    for fn in fns:
        for _ in range(warmup):
            fn()
    samples = [[] for _ in ns]
    for _ in range(repeats):
        for fn, out in zip(fns, samples):
            t0 = time.perf_counter()
            fn()
            out.append(time.perf_counter() - t0)
    rows = []
    prev = None
    for n, ts in zip(ns, samples):
        q1, med, q3 = np.percentile(ts, [25, 50, 75])
        rows.append({"n": n, "median": float(med), "iqr": float(q3 - q1),
                     "ratio": None if prev is None else float(med) / prev})
        prev = float(med)
    return rows
