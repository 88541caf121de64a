"""Command-line entry point: ``hamkit <command> ...``.

Exit codes: 0 success, 1 usage/config error, 2 numeric failure, 3 I/O error.
"""
from __future__ import annotations

import argparse
import os
import sys

if "HAMKIT_THREADS" in os.environ:  # must precede the numpy import
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ[_var] = os.environ["HAMKIT_THREADS"]

import json  # noqa: E402
import logging  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import analyzer, graddiff, plotting  # noqa: E402
from .experiment import ExperimentConfig, compare_modes, run_experiment  # noqa: E402
from .matcore import NumericError, ParameterError, ShapeError, make_rng  # noqa: E402
from .mdsolve import DomainError, MdModel  # noqa: E402
from .trainer import Checkpoint, load_dataset, make_synthetic_task, save_dataset  # noqa: E402

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _emit(payload: dict, out: str | None, name: str = "report.json") -> None:
    text = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    sys.stdout.write(text)
    if out:
        Path(out).mkdir(parents=True, exist_ok=True)
        (Path(out) / name).write_text(text)


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    return cfg.with_overrides(args.set)


def _parse_shape(text: str):
    try:
        parts = tuple(int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"shape {text!r} must look like 512x128x128") from None
    if len(parts) != 3:
        raise UsageError(f"shape {text!r} must have three dimensions")
    return parts


def _parse_sizes(text: str) -> dict:
    out = {}
    for item in filter(None, (text or "").split(",")):
        k, _, v = item.partition("=")
        if k not in ("d", "n", "r") or not v.isdigit():
            raise UsageError(f"bad size {item!r}; use d=6,n=10,r=3")
        out[k] = int(v)
    return out


# ---------------------------------------------------------------- commands

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    cfg.task.validate()
    out = Path(args.out)
    if not out.parent.exists():
        raise FileNotFoundError(f"parent directory does not exist: {out.parent}")
    save_dataset(make_synthetic_task(cfg.task), out, force=args.force)
    print(f"wrote dataset to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.seeds:
        cfg = cfg.with_overrides([f"seeds=[{args.seeds}]"])
    if args.grad_mode:
        cfg = cfg.with_overrides([f"model.ham.grad_mode={args.grad_mode}"])
    if cfg.model.block == "hamburger":
        mode = cfg.model.ham.get("grad_mode", "one-step")
        if mode not in graddiff.GRAD_MODES:
            raise UsageError(f"invalid grad mode {mode!r}; choose from {{{', '.join(graddiff.GRAD_MODES)}}}")
        cfg.model.hamburger_config()
    out = args.out or cfg.output_dir
    data = load_dataset(args.data) if args.data else None
    ckpts, report = run_experiment(cfg, data, out, resume=args.resume, stop_after=args.stop_after, jobs=args.jobs)
    if args.plot:
        plotting.plot_training({f"seed {s}": ck.trace for s, ck in ckpts.items()}, Path(out) / "training.png")
    print(report["summary"])
    return EXIT_NUMERIC if report["any_nan"] else EXIT_OK


def cmd_compare(args) -> int:
    cfg = _config(args)
    if args.seeds:
        cfg = cfg.with_overrides([f"seeds=[{args.seeds}]"])
    modes = [m.strip() for m in args.modes.split(",")]
    for m in modes:
        if m not in graddiff.GRAD_MODES:
            raise UsageError(f"invalid grad mode {m!r}; choose from {{{', '.join(graddiff.GRAD_MODES)}}}")
    rep = compare_modes(cfg, modes, out_dir=args.out)
    _emit(rep, None)
    return EXIT_OK


def cmd_evaluate(args) -> int:
    from .trainer import evaluate

    ck = Checkpoint.load(args.checkpoint)
    data = load_dataset(args.data) if args.data else make_synthetic_task(_config(args).task)
    acc, miou, iou = evaluate(ck.model, data[args.split])
    _emit({"split": args.split, "acc": acc, "miou": miou,
           "class_iou": [None if np.isnan(v) else float(v) for v in iou]}, args.out, "evaluation.json")
    return EXIT_OK


def cmd_grad_check(args) -> int:
    if args.ham == "probe":
        probe = graddiff.affine_probe(args.lh, dim=4) if args.probe == "affine" else graddiff.tanh_probe(args.lh)
        rng = make_rng(args.seed)
        x, g = rng.normal(size=probe.dim), rng.normal(size=probe.dim)
        if args.mode != "implicit":
            raise UsageError("the probe grad-check compares the implicit gradient with a long unroll; use --mode implicit")
        rep = graddiff.probe_implicit_gradient(probe, x, g)
        ref = graddiff.probe_bptt_gradient(probe, np.zeros(probe.dim), x, g, args.long_unroll).gradients["x"]
        rep.oracle_max_rel_error = graddiff.max_rel_error(rep.gradients["x"], ref)
        rep.oracle_cosine = graddiff.cosine(rep.gradients["x"], ref)
        rep.extras.update(oracle="bptt", oracle_K=args.long_unroll)
    else:
        sizes = {"d": 6, "n": 10, "r": 3, **_parse_sizes(args.sizes)}
        model = MdModel(args.ham, temperature=args.temperature)
        rep = graddiff.grad_check(model, args.mode, K=args.K, seed=args.seed, terms=args.terms, **sizes)
    _emit(rep.to_dict(), args.out, "grad_report.json")
    return EXIT_OK


def cmd_probe_props(args) -> int:
    lh = args.lh
    if args.prop in (1, 3):
        probe = graddiff.affine_probe(lh) if args.probe == "affine" else graddiff.tanh_probe(lh)
        cp = graddiff.probe_contraction(probe, t_max=args.t_max, seed=args.seed)
        payload = {
            "prop": args.prop, "probe": cp.probe, "L_h": cp.L_h, "L_x": cp.L_x, "L_G": cp.L_G,
            "convergence_slope": cp.convergence_slope, "log_L_h": float(np.log(cp.L_h)),
            "prop1_holds": cp.prop1_holds, "prop3_h0_holds": cp.prop3_h0_holds,
            "prop3_x_holds": cp.prop3_x_holds, "grad_x_norm": cp.grad_x_norm,
            "grad_x_limit_bound": cp.grad_x_limit_bound, "grad_x_bound_holds": cp.grad_x_bound_holds,
            "grad_h0_norms": cp.grad_h0_norms,
        }
    else:
        probe = graddiff.tanh_probe(lh) if args.probe == "tanh" else graddiff.affine_probe(lh)
        rng = make_rng(args.seed)
        x, g = rng.normal(size=probe.dim), rng.normal(size=probe.dim)
        imp = graddiff.probe_implicit_gradient(probe, x, g).gradients["x"]
        bp = graddiff.probe_bptt_gradient(probe, np.zeros(probe.dim), x, g, 200).gradients["x"]
        payload = {"prop": 2, "probe": probe.name, "L_h": probe.L_h,
                   "implicit_vs_bptt200_max_abs_delta": float(np.max(np.abs(imp - bp)))}
    _emit(payload, args.out, "probe.json")
    return EXIT_OK


def cmd_spectrum(args) -> int:
    ck = Checkpoint.load(args.checkpoint)
    data = load_dataset(args.data) if args.data else make_synthetic_task(_config(args).task)
    model = ck.model
    if model.config.block != "hamburger":
        raise UsageError("spectrum needs a hamburger checkpoint")
    act = model.block_activations(data[args.split].x[args.sample:args.sample + 1])
    branch = analyzer.spectrum_report(act["X"][0], act["Xbar"][0])
    block = analyzer.spectrum_report(act["Z"][0], act["Y"][0])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "spectrum_branch.csv").write_text(branch.to_csv())
    (out / "spectrum_block.csv").write_text(block.to_csv())
    r = model.ham_config.r
    plotting.plot_spectrum(branch, out / "spectrum_branch.png", r=r)
    plotting.plot_spectrum(block, out / "spectrum_block.png", r=r)
    _emit({"r": r,
           "branch_ratio_before_r": branch.ratio_at(r, "before"), "branch_ratio_after_r": branch.ratio_at(r),
           "block_ratio_before_r": block.ratio_at(r, "before"), "block_ratio_after_r": block.ratio_at(r)},
          args.out, "spectrum.json")
    return EXIT_OK


def cmd_cost(args) -> int:
    rep = analyzer.cost_report(args.block, _parse_shape(args.shape), d=args.d, r=args.r, K=args.K)
    _emit(rep.to_dict(), args.out, "cost.json")
    return EXIT_OK


def cmd_bench(args) -> int:
    blocks = [b.strip() for b in args.block.split(",")]
    ns = [int(v) for v in args.ns.split(",")]
    tables = {b: analyzer.scaling_table(b, args.channels, ns, repeats=args.repeats, r=args.r, K=args.K) for b in blocks}
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        lines = ["block,n,median_s,iqr_s,ratio"]
        for b, rows in sorted(tables.items()):
            lines += [f"{b},{r['n']},{r['median']!r},{r['iqr']!r},{'' if r['ratio'] is None else repr(r['ratio'])}"
                      for r in rows]
        (out / "bench.csv").write_text("\n".join(lines) + "\n")
        plotting.plot_scaling(tables, out / "bench.png")
    _emit({"note": "wall-clock on this machine", "channels": args.channels, "tables": tables}, args.out, "bench.json")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="hamkit", description="Matrix-decomposition context blocks: solvers, gradients, training, analysis.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="YAML experiment config")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.lr0=0.05 (repeatable)")

    sp = sub.add_parser("gen-data", help="write the synthetic dataset")
    with_config(sp)
    sp.add_argument("--out", required=True)
    sp.add_argument("--force", action="store_true")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one model per seed")
    with_config(sp)
    sp.add_argument("--out")
    sp.add_argument("--data", help="dataset directory from gen-data (default: generate in memory)")
    sp.add_argument("--seeds", help="comma-separated seeds, e.g. 1,2,3,4,5")
    sp.add_argument("--grad-mode", choices=graddiff.GRAD_MODES)
    sp.add_argument("--resume", action="store_true")
    sp.add_argument("--stop-after", type=int, help="stop (and checkpoint) after this many iterations")
    sp.add_argument("--jobs", type=int, default=1)
    sp.add_argument("--plot", action="store_true", help="also render training.png")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("compare", help="same protocol under several gradient modes")
    with_config(sp)
    sp.add_argument("--modes", default="one-step,bptt")
    sp.add_argument("--seeds")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_compare)

    sp = sub.add_parser("evaluate", help="accuracy and mIoU of a checkpoint")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--split", default="val", choices=("train", "val", "test"))
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("grad-check", help="compare a gradient mode against its oracle (finite differences, or long BPTT for implicit)")
    sp.add_argument("--ham", choices=("vq", "cd", "nmf", "probe"), default="nmf")
    sp.add_argument("--mode", choices=graddiff.GRAD_MODES, default="bptt")
    sp.add_argument("--sizes", default="", help="e.g. d=6,n=10,r=3")
    sp.add_argument("--K", type=int, default=3)
    sp.add_argument("--terms", type=int, default=1)
    sp.add_argument("--temperature", type=float, default=0.01)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--probe", choices=("affine", "tanh"), default="affine")
    sp.add_argument("--lh", type=float, default=0.5, help="contraction factor of the probe map")
    sp.add_argument("--long-unroll", type=int, default=200)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_grad_check)

    sp = sub.add_parser("probe-props", help="empirical checks on designed contractive maps")
    sp.add_argument("--prop", type=int, choices=(1, 2, 3), required=True)
    sp.add_argument("--probe", choices=("affine", "tanh"), default=None)
    sp.add_argument("--lh", type=float, default=None)
    sp.add_argument("--t-max", type=int, default=100)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_probe_props)

    sp = sub.add_parser("spectrum", help="accumulative singular-value ratios before/after the block")
    with_config(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--data")
    sp.add_argument("--split", default="val")
    sp.add_argument("--sample", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_spectrum)

    sp = sub.add_parser("cost", help="analytic parameter and MAC counts")
    sp.add_argument("--block", choices=analyzer.BLOCK_NAMES, required=True)
    sp.add_argument("--shape", default="512x128x128", help="channels x height x width")
    sp.add_argument("--d", type=int)
    sp.add_argument("--r", type=int, default=64)
    sp.add_argument("--K", type=int, default=6)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_cost)

    sp = sub.add_parser("bench", help="forward-pass timing over token counts")
    sp.add_argument("--block", default="ham-nmf,sa")
    sp.add_argument("--channels", type=int, default=64)
    sp.add_argument("--ns", default="1024,2048,4096")
    sp.add_argument("--repeats", type=int, default=20)
    sp.add_argument("--r", type=int, default=8)
    sp.add_argument("--K", type=int, default=6)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "command", None) == "probe-props":
        if args.probe is None:
            args.probe = "tanh" if args.prop == 2 else "affine"
        if args.lh is None:
            args.lh = 0.8 if args.probe == "tanh" else 0.5
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ParameterError, ShapeError, DomainError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    raise SystemExit(main())
