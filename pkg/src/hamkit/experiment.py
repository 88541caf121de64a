"""Experiment configs (YAML with dotted-key overrides) and multi-seed runs.

Seed derivation: the dataset depends only on ``task.seed``; each declared
run seed ``s`` drives parameter init (``derive_seed(s, "params")``) and the
per-iteration batch and dictionary draws (``derive_seed(s, "iter", i)``).
"""
from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml

from .matcore import ParameterError
from .trainer import (
    Checkpoint,
    Dataset,
    ModelConfig,
    SyntheticTaskSpec,
    TrainConfig,
    evaluate,
    gradient_norm_spread,
    make_synthetic_task,
    train,
)


def reference_task() -> SyntheticTaskSpec:
    return SyntheticTaskSpec(height=32, width=32, c_in=16, k=4, r_true=4, noise_sigma=0.1,
                             library_size=8, regions=2, n_train=512, n_val=128, n_test=128, seed=0)


def reference_model(block: str = "hamburger", grad_mode: str = "one-step") -> ModelConfig:
    ham = {"model": "nmf", "d": 16, "r": 4, "K": 6, "grad_mode": grad_mode} if block == "hamburger" else {}
    return ModelConfig(block=block, d_z=16, ham=ham)


def reference_train() -> TrainConfig:
    return TrainConfig(lr0=0.1, momentum=0.9, weight_decay=1e-4, batch=8, iters_max=300, power=0.9,
                       eval_interval=100)


@dataclass
class ExperimentConfig:
    task: SyntheticTaskSpec = field(default_factory=reference_task)
    model: ModelConfig = field(default_factory=reference_model)
    train: TrainConfig = field(default_factory=reference_train)
    output_dir: str = "runs/reference"
    seeds: list = field(default_factory=lambda: [1, 2, 3, 4, 5])

    def to_dict(self) -> dict:
        return {
            "task": asdict(self.task),
            "model": asdict(self.model),
            "train": asdict(self.train),
            "output_dir": self.output_dir,
            "seeds": list(self.seeds),
        }

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d or {})
        unknown = set(d) - {"task", "model", "train", "output_dir", "seeds"}
        if unknown:
            raise ParameterError(f"unknown config sections: {sorted(unknown)}")
        base = cls()
        return cls(
            task=_merge(base.task, d.get("task")),
            model=_merge(base.model, d.get("model")),
            train=_merge(base.train, d.get("train")),
            output_dir=str(d.get("output_dir", base.output_dir)),
            seeds=[int(s) for s in d.get("seeds", base.seeds)],
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(yaml.safe_load(Path(path).read_text()))

    def with_overrides(self, items) -> "ExperimentConfig":
        """Apply ``section.key=value`` strings (values parsed as YAML scalars)."""
        d = self.to_dict()
        for item in items or ():
            if "=" not in item:
                raise ParameterError(f"override {item!r} is not of the form key=value")
            key, raw = item.split("=", 1)
            target = d
            parts = key.split(".")
            for p in parts[:-1]:
                target = target.setdefault(p, {})
                if not isinstance(target, dict):
                    raise ParameterError(f"override {key!r} descends into a scalar")
            target[parts[-1]] = yaml.safe_load(raw)
        return ExperimentConfig.from_dict(d)


def _merge(default, override):
    if override is None:
        return copy.deepcopy(default)
    names = {f.name for f in fields(default)}
    unknown = set(override) - names
    if unknown:
        raise ParameterError(f"unknown keys for {type(default).__name__}: {sorted(unknown)}")
    values = asdict(default)
    for k, v in override.items():
        values[k] = {**values[k], **v} if isinstance(values[k], dict) and isinstance(v, dict) else v
    try:
        return type(default)(**values)
    except TypeError as exc:
        raise ParameterError(str(exc)) from exc


def seed_dirs(out_dir, seed: int):
    root = Path(out_dir)
    return root / f"seed_{seed}", root / "checkpoints" / f"seed_{seed}"


def run_seed(cfg: ExperimentConfig, seed: int, data: Dataset, out_dir=None, resume: bool = False,
             stop_after: int | None = None) -> Checkpoint:
    tc = copy.deepcopy(cfg.train)
    tc.seed = seed
    start = None
    if out_dir is not None:
        run_dir, ckpt_dir = seed_dirs(out_dir, seed)
        if resume and (ckpt_dir / "manifest.json").exists():
            start = Checkpoint.load(ckpt_dir)
    ckpt = train(copy.deepcopy(cfg.model), data, tc, resume=start, stop_after=stop_after)
    if out_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        ckpt.save(ckpt_dir)
        (run_dir / "metrics.csv").write_text(ckpt.trace.to_csv())
    return ckpt


def summarize(ckpts: dict, data: Dataset | None = None) -> dict:
    """Per-seed final validation numbers plus best(mean) in the usual reporting format."""
    per_seed = {}
    for seed, ck in sorted(ckpts.items()):
        _, acc, miou = ck.trace.final
        per_seed[str(seed)] = {"val_acc": acc, "val_miou": miou, "nan": ck.trace.nan, "iterations": ck.iteration}
        if data is not None and len(data["test"]):
            tacc, tmiou, _ = evaluate(ck.model, data["test"])
            per_seed[str(seed)].update(test_acc=tacc, test_miou=tmiou)
    accs = np.array([v["val_acc"] for v in per_seed.values()], dtype=float)
    mious = np.array([v["val_miou"] for v in per_seed.values()], dtype=float)
    return {
        "seeds": per_seed,
        "val_acc_mean": float(np.mean(accs)),
        "val_acc_best": float(np.max(accs)),
        "val_miou_mean": float(np.mean(mious)),
        "val_miou_best": float(np.max(mious)),
        "any_nan": any(v["nan"] for v in per_seed.values()),
        "summary": f"mIoU best(mean): {100 * np.max(mious):.1f}({100 * np.mean(mious):.1f})  "
                   f"acc best(mean): {100 * np.max(accs):.1f}({100 * np.mean(accs):.1f})",
    }


def run_experiment(cfg: ExperimentConfig, data: Dataset | None = None, out_dir=None, resume: bool = False,
                   stop_after: int | None = None, jobs: int = 1) -> tuple[dict, dict]:
    data = data if data is not None else make_synthetic_task(cfg.task)
    if jobs > 1 and len(cfg.seeds) > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futs = {s: pool.submit(run_seed, cfg, s, data, out_dir, resume, stop_after) for s in cfg.seeds}
            ckpts = {s: f.result() for s, f in futs.items()}
    else:
        ckpts = {s: run_seed(cfg, s, data, out_dir, resume, stop_after) for s in cfg.seeds}
    report = summarize(ckpts)
    report["config"] = cfg.to_dict()
    if out_dir is not None:
        root = Path(out_dir)
        (root / "config.snapshot").write_text(cfg.to_yaml())
        (root / "report.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    return ckpts, report


def compare_modes(cfg: ExperimentConfig, modes=("one-step", "bptt"), data: Dataset | None = None,
                  out_dir=None) -> dict:
    """Same protocol under several gradient modes; reports each mode's seed mean, asserts no winner.

    Each mode also gets the across-batch coefficient of variation of the
    gradient norm at the trained parameters, averaged over seeds.
    """
    data = data if data is not None else make_synthetic_task(cfg.task)
    out = {"modes": {}}
    for mode in modes:
        c = cfg.with_overrides([f"model.ham.grad_mode={mode}"])
        sub = None if out_dir is None else Path(out_dir) / mode
        ckpts, rep = run_experiment(c, data, sub)
        out["modes"][mode] = {k: rep[k] for k in ("val_acc_mean", "val_miou_mean", "val_acc_best",
                                                  "val_miou_best", "any_nan", "summary")}
        # reported only: spread of gradient norms across batches at the final parameters
        spreads = [gradient_norm_spread(ck.model, data["train"], c.train.batch, seed=s) for s, ck in ckpts.items()]
        out["modes"][mode]["grad_norm_cv_mean"] = float(np.mean([sp["cv"] for sp in spreads]))
        out["modes"][mode]["grad_norm_mean"] = float(np.mean([sp["mean"] for sp in spreads]))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        (Path(out_dir) / "comparison.json").write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return out
