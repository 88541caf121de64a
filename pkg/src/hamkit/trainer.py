"""Desk-scale segmentation training on synthetic low-rank textures.

The model is per-pixel: linear encoder + ReLU, a context block, then a
linear classifier. The context block is the only path between pixels, so
any gain over the ``none`` block is due to global context.
"""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import burger
from .burger import AttentionParams, HamburgerConfig, HamburgerParams
from .matcore import BatchNormState, ParameterError, ShapeError, derive_seed, make_rng, tape
from .matcore.serialize import read_binary, write_binary

log = logging.getLogger(__name__)

BLOCKS = ("none", "hamburger", "attention")


# ---------------------------------------------------------------- synthetic task

@dataclass
class SyntheticTaskSpec:
    height: int = 32
    width: int = 32
    c_in: int = 16
    k: int = 4
    r_true: int = 4
    noise_sigma: float = 0.1
    library_size: int = 8
    regions: int = 2
    n_train: int = 512
    n_val: int = 128
    n_test: int = 128
    seed: int = 0

    def validate(self) -> None:
        if self.r_true > self.c_in:
            raise ParameterError("r_true must not exceed c_in")
        if self.k > self.library_size:
            raise ParameterError("k must not exceed the texture library size")
        if self.r_true > self.library_size:
            raise ParameterError("r_true must not exceed the texture library size")
        if self.regions < 1 or self.regions > self.k:
            raise ParameterError("regions must lie in [1, k]")
        if self.noise_sigma < 0:
            raise ParameterError("noise_sigma must be >= 0")
        if min(self.height, self.width, self.c_in, self.k, self.n_train) < 1:
            raise ParameterError("sizes must be positive")
        if self.n_val < 0 or self.n_test < 0:
            raise ParameterError("split sizes must be >= 0")


@dataclass
class Split:
    x: np.ndarray  # (N, c_in, n)
    y: np.ndarray  # (N, n) integer labels

    def __len__(self):
        return self.x.shape[0]


@dataclass
class Dataset:
    spec: SyntheticTaskSpec
    atoms: np.ndarray  # c_in x library_size
    textures: np.ndarray  # k x r_true atom indices
    splits: dict

    def __getitem__(self, name) -> Split:
        return self.splits[name]


def texture_library(spec: SyntheticTaskSpec):
    """Nonnegative atoms and the atom subsets making up each texture (class).

    Textures share atoms, so a single pixel does not identify its texture;
    the set of atoms present in a region does.
    """
    rng = make_rng(derive_seed(spec.seed, "library"))
    atoms = rng.uniform(0.0, 1.0, size=(spec.c_in, spec.library_size))
    atoms /= np.linalg.norm(atoms, axis=0, keepdims=True)
    textures = []
    seen = set()
    while len(textures) < spec.k:
        subset = tuple(sorted(rng.choice(spec.library_size, size=spec.r_true, replace=False).tolist()))
        if subset not in seen or len(seen) >= _n_subsets(spec):
            seen.add(subset)
            textures.append(subset)
    return atoms, np.array(textures, dtype=np.int64)


def _n_subsets(spec) -> int:
    from math import comb
    return comb(spec.library_size, spec.r_true)


def _region_map(rng, h: int, w: int, regions: int) -> np.ndarray:
    """Split the grid into ``regions`` stripes along a random axis at random cut points."""
    axis = rng.integers(2)
    length = h if axis == 0 else w
    cuts = np.sort(rng.choice(np.arange(1, length), size=regions - 1, replace=False)) if regions > 1 else []
    stripe = np.searchsorted(cuts, np.arange(length), side="right")
    return np.repeat(stripe[:, None], w, axis=1) if axis == 0 else np.repeat(stripe[None, :], h, axis=0)


def _sample(rng, spec, atoms, textures):
    h, w = spec.height, spec.width
    regions = _region_map(rng, h, w, spec.regions).ravel()
    chosen = rng.choice(spec.k, size=spec.regions, replace=False)
    labels = chosen[regions]
    n = h * w
    which = rng.integers(spec.r_true, size=n)
    amp = rng.uniform(0.5, 1.5, size=n)
    atom_idx = textures[labels, which]
    x = atoms[:, atom_idx] * amp
    if spec.noise_sigma > 0:
        x = x + rng.normal(0.0, spec.noise_sigma, size=x.shape)
    return x, labels


def make_synthetic_task(spec: SyntheticTaskSpec) -> Dataset:
    spec.validate()
    atoms, textures = texture_library(spec)
    splits = {}
    for name, count in (("train", spec.n_train), ("val", spec.n_val), ("test", spec.n_test)):
        rng = make_rng(derive_seed(spec.seed, "split", name))
        xs, ys = [], []
        for _ in range(count):
            x, y = _sample(rng, spec, atoms, textures)
            xs.append(x)
            ys.append(y)
        n = spec.height * spec.width
        splits[name] = Split(np.array(xs).reshape(count, spec.c_in, n), np.array(ys, dtype=np.int64).reshape(count, n))
    return Dataset(spec, atoms, textures, splits)


def save_dataset(ds: Dataset, out_dir, force: bool = False) -> None:
    out = Path(out_dir)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {out.parent}")
    if out.exists() and any(out.iterdir()) and not force:
        raise FileExistsError(f"{out} is not empty (use --force to overwrite)")
    out.mkdir(exist_ok=True)
    (out / "spec.json").write_text(json.dumps(asdict(ds.spec), indent=2, sort_keys=True) + "\n")
    write_binary(out / "atoms.bin", ds.atoms)
    for name, split in ds.splits.items():
        sdir = out / name
        sdir.mkdir(exist_ok=True)
        lines = []
        for i in range(len(split)):
            write_binary(sdir / f"{i:05d}.bin", split.x[i])
            lines.append(",".join(str(int(v)) for v in split.y[i]))
        (sdir / "labels.csv").write_text("\n".join(lines) + ("\n" if lines else ""))


def load_dataset(path) -> Dataset:
    root = Path(path)
    spec = SyntheticTaskSpec(**json.loads((root / "spec.json").read_text()))
    atoms, textures = texture_library(spec)
    splits = {}
    for name in ("train", "val", "test"):
        sdir = root / name
        if not sdir.exists():
            continue
        files = sorted(sdir.glob("*.bin"))
        rows = [r for r in (sdir / "labels.csv").read_text().splitlines() if r]
        x = np.array([read_binary(f) for f in files]) if files else np.zeros((0, spec.c_in, spec.height * spec.width))
        y = np.array([[int(v) for v in r.split(",")] for r in rows], dtype=np.int64)
        splits[name] = Split(x, y.reshape(len(files), -1))
    return Dataset(spec, atoms, textures, splits)


# ---------------------------------------------------------------- model

@dataclass
class ModelConfig:
    block: str = "hamburger"
    d_z: int = 16
    ham: dict = field(default_factory=dict)  # HamburgerConfig overrides: d, r, K, model, temperature, ...
    eval_seed: int = 1234

    def __post_init__(self):
        if self.block not in BLOCKS:
            raise ParameterError(f"unknown block {self.block!r}; expected one of {BLOCKS}")

    def hamburger_config(self) -> HamburgerConfig:
        from .mdsolve import InitStrategy, MdModel

        h = dict(self.ham)
        model = MdModel(h.pop("model", "nmf"), temperature=h.pop("temperature", 0.01), beta=h.pop("beta", 0.01))
        init = InitStrategy(h.pop("init", "random"), seed=h.pop("init_seed", 0))
        d = h.pop("d", self.d_z)
        r = h.pop("r", 4)
        return HamburgerConfig(d_z=self.d_z, d=d, r=r, model=model, init=init, **h)


class SegModel:
    """Per-pixel encoder -> context block -> per-pixel classifier."""

    def __init__(self, config: ModelConfig, c_in: int, k: int, seed: int):
        self.config = config
        self.c_in, self.k = c_in, k
        rng = make_rng(derive_seed(seed, "params"))
        d_z = config.d_z
        self.params = {
            "enc_W": rng.normal(0.0, np.sqrt(2.0 / c_in), size=(d_z, c_in)),
            "enc_b": np.zeros((d_z, 1)),
            "cls_W": rng.normal(0.0, np.sqrt(1.0 / d_z), size=(k, d_z)),
            "cls_b": np.zeros((k, 1)),
        }
        self.bn: BatchNormState | None = None
        self.ham_config = None
        if config.block == "hamburger":
            self.ham_config = config.hamburger_config()
            hp = HamburgerParams.init(self.ham_config, rng)
            self.bn = hp.bn
            self.params.update(hp.arrays())
        elif config.block == "attention":
            ap = AttentionParams.init(d_z, rng)
            self.bn = ap.bn
            self.params.update(ap.arrays())

    def set_mode(self, mode: str) -> None:
        if self.bn is not None:
            self.bn.mode = mode

    def forward(self, x: np.ndarray, rng, pv: dict | None = None):
        """Logits (B, k, n) as a tape Var; ``pv`` supplies parameter Vars when gradients are wanted."""
        if x.shape[-2] != self.c_in:
            raise ShapeError(f"expected {self.c_in} input channels, got {x.shape[-2]}")
        pv = pv if pv is not None else {k: tape.const(v) for k, v in self.params.items()}
        if self.bn is not None:
            self.bn.gamma, self.bn.beta = pv["bn_gamma"].value, pv["bn_beta"].value
        Z = tape.relu(tape.matmul(pv["enc_W"], tape.const(x)) + pv["enc_b"])
        parts = {}
        if self.config.block == "hamburger":
            hp = HamburgerParams(self.params["W_l"], self.params["W_u"], self.bn)
            Z, parts = burger.hamburger_apply(Z, pv, hp, self.ham_config, rng)
        elif self.config.block == "attention":
            ap = AttentionParams(self.params["W_q"], self.params["W_k"], self.params["W_v"], self.params["W_o"], self.bn)
            Z, parts = burger.attention_apply(Z, pv, ap)
        logits = tape.matmul(pv["cls_W"], Z) + pv["cls_b"]
        return logits, parts

    def block_activations(self, x: np.ndarray) -> dict:
        """Eval-mode activations around the block for one batch: Z (input), X, Xbar, Y (output)."""
        mode = self.bn.mode if self.bn is not None else "train"
        self.set_mode("eval")
        pv = {k: tape.const(v) for k, v in self.params.items()}
        Z = tape.relu(tape.matmul(pv["enc_W"], tape.const(x)) + pv["enc_b"])
        out = {"Z": Z.value}
        if self.config.block == "hamburger":
            hp = HamburgerParams(self.params["W_l"], self.params["W_u"], self.bn)
            Y, parts = burger.hamburger_apply(Z, pv, hp, self.ham_config, make_rng(self.config.eval_seed))
            out.update(X=parts["X"].value, Xbar=parts["Xbar"].value, Y=Y.value)
        self.set_mode(mode)
        return out

    def loss_and_grads(self, x, y, rng):
        pv = {k: tape.leaf(v, name=k) for k, v in self.params.items()}
        logits, parts = self.forward(x, rng, pv)
        loss = tape.softmax_cross_entropy(logits, y)
        names = list(pv)
        grads = tape.grad(loss, 1.0, [pv[n] for n in names])
        return float(loss.value), dict(zip(names, grads)), parts

    def predict(self, x: np.ndarray, batch: int = 16) -> np.ndarray:
        self.set_mode("eval")
        out = []
        for i in range(0, x.shape[0], batch):
            rng = make_rng(self.config.eval_seed)
            logits, _ = self.forward(x[i:i + batch], rng)
            out.append(logits.value.argmax(axis=-2))
        self.set_mode("train")
        return np.concatenate(out) if out else np.zeros((0, x.shape[-1]), dtype=np.int64)


# ---------------------------------------------------------------- optimization

@dataclass
class TrainConfig:
    lr0: float = 0.009
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch: int = 8
    iters_max: int = 300
    power: float = 0.9
    eval_interval: int = 100
    seed: int = 0


def poly_lr(i: int, config: TrainConfig) -> float:
    return config.lr0 * (1.0 - i / config.iters_max) ** config.power


def sgd_poly_step(params: dict, grads: dict, velocity: dict, i: int, config: TrainConfig) -> dict:
    """Momentum SGD with weight decay under the poly schedule; returns new params, updates ``velocity``."""
    if i >= config.iters_max:
        raise ParameterError(f"iteration {i} is past iters_max={config.iters_max}")
    lr = poly_lr(i, config)
    out = {}
    for name, p in params.items():
        v = config.momentum * velocity.get(name, np.zeros_like(p)) + grads[name] + config.weight_decay * p
        velocity[name] = v
        out[name] = p - lr * v
    return out


# ---------------------------------------------------------------- metrics

def confusion_matrix(pred: np.ndarray, truth: np.ndarray, k: int) -> np.ndarray:
    pred, truth = np.asarray(pred).ravel(), np.asarray(truth).ravel()
    if pred.shape != truth.shape:
        raise ShapeError(f"prediction {pred.shape} vs truth {truth.shape}")
    return np.bincount(truth * k + pred, minlength=k * k).reshape(k, k)


def scores(pred, truth, k: int):
    """(accuracy, mean IoU, per-class IoU); classes absent from both are skipped (NaN)."""
    cm = confusion_matrix(pred, truth, k)
    tp = np.diag(cm).astype(float)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = tp + fp + fn
    iou = np.where(denom > 0, tp / np.where(denom > 0, denom, 1), np.nan)
    acc = float(tp.sum() / max(cm.sum(), 1))
    miou = float(np.nanmean(iou)) if np.any(denom > 0) else float("nan")
    return acc, miou, iou


@dataclass
class MetricsTrace:
    iters: list = field(default_factory=list)
    losses: list = field(default_factory=list)
    evals: list = field(default_factory=list)  # (iter, acc, miou)
    nan: bool = False

    def log_loss(self, i: int, loss: float) -> None:
        self.iters.append(i)
        self.losses.append(loss)

    def log_eval(self, i: int, acc: float, miou: float) -> None:
        self.evals.append((i, acc, miou))

    def to_csv(self) -> str:
        ev = {i: (a, m) for i, a, m in self.evals}
        lines = ["iter,loss,acc,miou"]
        for i, loss in zip(self.iters, self.losses):
            a, m = (repr(v) for v in ev[i + 1]) if i + 1 in ev else ("", "")
            lines.append(f"{i},{loss!r},{a},{m}")
        return "\n".join(lines) + "\n"

    def to_dict(self) -> dict:
        return {"iters": self.iters, "losses": self.losses, "evals": [list(e) for e in self.evals], "nan": self.nan}

    @classmethod
    def from_dict(cls, d) -> "MetricsTrace":
        return cls(list(d["iters"]), list(d["losses"]), [tuple(e) for e in d["evals"]], bool(d["nan"]))

    @property
    def final(self):
        return self.evals[-1] if self.evals else (None, float("nan"), float("nan"))


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    model: SegModel
    iteration: int
    velocity: dict
    trace: MetricsTrace
    model_config: ModelConfig
    train_config: TrainConfig
    seed: int

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        arrays = {f"param.{k}": v for k, v in self.model.params.items()}
        arrays.update({f"velocity.{k}": v for k, v in self.velocity.items()})
        if self.model.bn is not None:
            arrays["bn.running_mean"] = self.model.bn.running_mean
            arrays["bn.running_var"] = self.model.bn.running_var
        init = self.model.ham_config.init if self.model.ham_config is not None else None
        if init is not None and init.stored is not None:
            arrays["init.stored"] = init.stored
        shapes = {}
        for name, a in arrays.items():
            shapes[name] = list(a.shape)
            write_binary(out / f"{name}.bin", np.asarray(a).reshape(a.shape[0] if a.ndim else 1, -1))
        manifest = {
            "model_config": asdict(self.model_config),
            "train_config": asdict(self.train_config),
            "c_in": self.model.c_in,
            "k": self.model.k,
            "seed": self.seed,
            "iteration": self.iteration,
            "shapes": shapes,
            "trace": self.trace.to_dict(),
        }
        (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "Checkpoint":
        root = Path(path)
        man = json.loads((root / "manifest.json").read_text())
        mc = ModelConfig(**man["model_config"])
        tc = TrainConfig(**man["train_config"])
        model = SegModel(mc, man["c_in"], man["k"], man["seed"])
        arrays = {name: read_binary(root / f"{name}.bin").reshape(shape) for name, shape in man["shapes"].items()}
        model.params = {k[6:]: v for k, v in arrays.items() if k.startswith("param.")}
        velocity = {k[9:]: v for k, v in arrays.items() if k.startswith("velocity.")}
        if model.bn is not None:
            model.bn.running_mean = arrays["bn.running_mean"]
            model.bn.running_var = arrays["bn.running_var"]
        if "init.stored" in arrays:
            model.ham_config.init.stored = arrays["init.stored"]
        return cls(model, man["iteration"], velocity, MetricsTrace.from_dict(man["trace"]), mc, tc, man["seed"])


# ---------------------------------------------------------------- loop

def evaluate(model: SegModel, split: Split):
    """Accuracy, mean IoU and per-class IoU of ``model`` on ``split``."""
    if split.x.shape[-2] != model.c_in:
        raise ShapeError(f"split has {split.x.shape[-2]} channels, model expects {model.c_in}")
    pred = model.predict(split.x)
    return scores(pred, split.y, model.k)


def gradient_norm_spread(model: SegModel, split: Split, batch: int = 8, n_batches: int = 16, seed: int = 0) -> dict:
    """Mean, std and coefficient of variation of the full gradient norm over fixed random batches.

    Works on a copy, so batch-norm running statistics of ``model`` are untouched.
    """
    m = copy.deepcopy(model)
    m.set_mode("train")
    norms = []
    for j in range(n_batches):
        rng = make_rng(derive_seed(seed, "gradnorm", j))
        idx = rng.choice(len(split), size=min(batch, len(split)), replace=False)
        _, grads, _ = m.loss_and_grads(split.x[idx], split.y[idx], rng)
        norms.append(float(np.sqrt(sum(np.sum(g * g) for g in grads.values()))))
    norms = np.array(norms)
    mean = float(norms.mean())
    return {"mean": mean, "std": float(norms.std()), "cv": float(norms.std() / mean) if mean > 0 else 0.0}


def train(model_config: ModelConfig, task: Dataset, train_config: TrainConfig,
          resume: Checkpoint | None = None, stop_after: int | None = None) -> Checkpoint:
    """Train for ``iters_max`` iterations (or until ``stop_after``); NaN losses stop the run and set the flag."""
    seed = train_config.seed
    if resume is not None:
        ckpt = resume
    else:
        model = SegModel(model_config, task.spec.c_in, task.spec.k, seed)
        ckpt = Checkpoint(model, 0, {}, MetricsTrace(), model_config, train_config, seed)
    model = ckpt.model
    train_split, val_split = task["train"], task["val"]
    end = train_config.iters_max if stop_after is None else min(stop_after, train_config.iters_max)
    model.set_mode("train")
    while ckpt.iteration < end:
        i = ckpt.iteration
        rng = make_rng(derive_seed(seed, "iter", i))
        idx = rng.choice(len(train_split), size=min(train_config.batch, len(train_split)), replace=False)
        loss, grads, parts = model.loss_and_grads(train_split.x[idx], train_split.y[idx], rng)
        ckpt.trace.log_loss(i, loss)
        if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
            ckpt.trace.nan = True
            log.warning("non-finite loss at iteration %d; stopping", i)
            ckpt.iteration = i + 1
            break
        model.params = sgd_poly_step(model.params, grads, ckpt.velocity, i, train_config)
        if model.ham_config is not None and "D" in parts:
            model.ham_config.init.update(parts["D"])
        ckpt.iteration = i + 1
        if ckpt.iteration % train_config.eval_interval == 0 or ckpt.iteration == train_config.iters_max:
            acc, miou, _ = evaluate(model, val_split)
            ckpt.trace.log_eval(ckpt.iteration, acc, miou)
            log.info("iter %d loss %.4f acc %.4f miou %.4f", ckpt.iteration, loss, acc, miou)
    return ckpt
