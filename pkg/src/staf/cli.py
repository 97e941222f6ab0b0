"""Command line: gen, infer, eval, gradcheck, ablate-apm, train-overfit, plot.

Exit codes: 0 ok, 1 usage, 2 validation failure, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import sys
from pathlib import Path

import numpy as np

from . import numeric_core as nc
from .body_model import DESK_TEMPLATE, PAPER_TEMPLATE, make_mini_template
from .harness import SynthSpec, ablate_apm, desk_dataset, generate_synthetic, load_sequence, save_sequence, train_overfit
from .metrics import LossWeights, body_predictions, evaluate_arrays
from .pipeline import (
    DESK_CONFIG,
    PAPER_CONFIG,
    init_model,
    load_model,
    run_sequence,
    save_model,
    staf_forward,
    window_indices,
)
from .plot import plot_csv
from .safm import write_alpha_csv
from .tcfm import write_matrices_csv
from .tensor_io import FormatError

EXIT_OK, EXIT_USAGE, EXIT_INVALID, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: error: {message}")


def _fmt(x) -> str:
    return repr(float(x))


def _existing(path: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"no such file: {path}")
    return p


def _scale(args):
    return (PAPER_CONFIG, PAPER_TEMPLATE) if args.paper_scale else (DESK_CONFIG, DESK_TEMPLATE)


# --------------------------------------------------------------------------
# subcommands
# --------------------------------------------------------------------------


def cmd_gen(args) -> int:
    config, tcfg = _scale(args)
    spec = SynthSpec(length=args.length, keyframes=args.keyframes, pose_amp=args.pose_amp,
                     shape_amp=args.shape_amp, cam_jitter=args.cam_jitter, noise_sigma=args.noise,
                     time_amp=args.time_amp, seed=args.seed, encoder_seed=args.encoder_seed)
    seq = generate_synthetic(spec, tcfg, config.pyramid, template_seed=args.template_seed)
    save_sequence(seq, args.output)
    print(f"wrote {args.output}: L={seq.length} feature map {seq.phi0.shape[1:]}")
    return EXIT_OK


def _model_for(args, seq):
    if args.model:
        model = load_model(_existing(args.model))
    else:
        config, _ = _scale(args)
        model = init_model(config, seq.template(), seed=args.seed)
    if model.template.fingerprint() != seq.template_hash:
        raise FormatError("model template does not match the sequence template")
    if seq.phi0.shape[1:] != (model.config.pyramid.c0, model.config.pyramid.h0, model.config.pyramid.w0):
        raise FormatError(f"sequence feature maps {seq.phi0.shape[1:]} do not fit the model")
    return model


def write_params_csv(path, theta) -> None:
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        out.writerow(["frame"] + [f"theta_{i}" for i in range(theta.shape[1])])
        for i, row in enumerate(theta):
            out.writerow([i] + [_fmt(v) for v in row])


def read_params_csv(path) -> np.ndarray:
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0][0] != "frame":
        raise FormatError(f"{path}: not a parameter CSV")
    try:
        return np.array([[float(v) for v in r[1:]] for r in rows[1:]], dtype=np.float64).reshape(len(rows) - 1, -1)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


def cmd_infer(args) -> int:
    seq = load_sequence(_existing(args.sequence))
    model = _model_for(args, seq)
    use_apm = not args.no_apm
    theta = run_sequence(seq.phi0, model, use_apm=use_apm, chunk=args.chunk, workers=args.workers)
    write_params_csv(args.output, theta)
    if args.matrices or args.alphas:
        out = staf_forward(seq.phi0, model, use_apm=use_apm, index=window_indices(seq.length, model.config.window))
        if args.matrices:
            write_matrices_csv(args.matrices, {k: out.diagnostics[k] for k in ("m_con", "m_sim", "m_g")})
        if args.alphas:
            write_alpha_csv(args.alphas, out.diagnostics["alphas"])
    print(f"wrote {args.output}: {len(theta)} frames")
    return EXIT_OK


def cmd_eval(args) -> int:
    gt = load_sequence(_existing(args.gt))
    template = gt.template()
    pred_path = _existing(args.pred)
    if pred_path.suffix.lower() == ".csv":
        theta = read_params_csv(pred_path)
        if theta.shape != gt.theta.shape:
            raise FormatError(f"prediction has shape {theta.shape}, ground truth {gt.theta.shape}")
        pred = body_predictions(theta, template)
        pj, pv = pred["joints3d"], pred["verts"]
    else:
        ps = load_sequence(pred_path)
        if ps.template_hash != gt.template_hash or ps.length != gt.length:
            raise FormatError("prediction sequence does not match the ground truth")
        pj, pv = ps.joints3d, ps.vertices
    report = evaluate_arrays(pj, gt.joints3d, pv, gt.vertices, fps=args.fps)
    report.to_csv(args.output)
    m = report.means
    print(f"mpjpe {m['mpjpe']:.4f}  pa_mpjpe {m['pa_mpjpe']:.4f}  pve {m['pve']:.4f}  "
          f"accel {m['accel']:.4f} {report.accel_unit}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck_suite import run_suite

    names = args.only or None
    results = run_suite(trials=args.trials, names=names, end_to_end=not args.skip_end_to_end, log=print)
    failed = [r.name for r in results if not r.passed(args.tol)]
    print(f"{len(results) - len(failed)}/{len(results)} passed")
    return EXIT_INVALID if failed else EXIT_OK


def cmd_ablate(args) -> int:
    seeds = list(range(args.seed, args.seed + args.seeds))
    rep = ablate_apm(seeds, length=args.length, fps=args.fps, workers=args.workers)
    if args.output:
        with open(args.output, "w", newline="") as f:
            out = csv.writer(f)
            out.writerow(["seed", "accel_on", "accel_off"])
            for s, a, b in rep.rows():
                out.writerow([s, _fmt(a), _fmt(b)])
            out.writerow(["median", _fmt(rep.median_on), _fmt(rep.median_off)])
    print(f"median accel  on {rep.median_on:.4f}  off {rep.median_off:.4f}  "
          f"({sum(a < b for a, b in zip(rep.accel_on, rep.accel_off))}/{len(seeds)} seeds lower with APM)")
    return EXIT_OK


def cmd_train(args) -> int:
    config, tcfg = _scale(args)
    model = init_model(config, make_mini_template(tcfg, 0), seed=args.seed)
    data = desk_dataset(args.sequences, args.length, seed=args.seed, model=model)
    res = train_overfit(model, data, args.steps, args.lr, optimizer=args.optimizer, patience=args.patience,
                        target_ratio=args.target_ratio, lam=LossWeights(), log=print)
    if args.output:
        save_model(res.model, args.output)
    if args.curve:
        with open(args.curve, "w", newline="") as f:
            out = csv.writer(f)
            out.writerow(["step", "loss", "lr"])
            for i, (l, r) in enumerate(zip(res.losses, res.lrs)):
                out.writerow([i, _fmt(l), _fmt(r)])
    print(f"loss {res.losses[0]:.6f} -> {res.losses[-1]:.6f} ({res.losses[-1] / res.losses[0]:.2%}); "
          f"mpjpe {res.mpjpe_initial:.3f} -> {res.mpjpe_final:.3f} mm")
    return EXIT_OK


def cmd_plot(args) -> int:
    plot_csv(_existing(args.csv), args.output, columns=args.columns, title=args.title or Path(args.csv).name)
    print(f"wrote {args.output}")
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="staf", description="Video human mesh recovery pipeline (numpy reference).")
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--fps", type=float, default=None, help="report acceleration in mm/s^2 at this frame rate")
    p.add_argument("--paper-scale", action="store_true", help="use the full-size template and pyramid")
    p.add_argument("--workers", type=int, default=1, help="worker processes for window evaluation")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic sequence file")
    g.add_argument("-o", "--output", required=True)
    d = SynthSpec()
    g.add_argument("--length", type=int, default=d.length)
    g.add_argument("--keyframes", type=int, default=d.keyframes)
    g.add_argument("--pose-amp", type=float, default=d.pose_amp)
    g.add_argument("--shape-amp", type=float, default=d.shape_amp)
    g.add_argument("--cam-jitter", type=float, default=d.cam_jitter)
    g.add_argument("--noise", type=float, default=d.noise_sigma)
    g.add_argument("--time-amp", type=float, default=d.time_amp)
    g.add_argument("--encoder-seed", type=int, default=d.encoder_seed)
    g.add_argument("--template-seed", type=int, default=0)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("infer", help="run the model over a sequence, write per-frame parameters")
    i.add_argument("sequence")
    i.add_argument("-o", "--output", required=True)
    i.add_argument("--model", help="checkpoint; default is a fresh model from --seed")
    i.add_argument("--no-apm", action="store_true")
    i.add_argument("--chunk", type=int, default=16)
    i.add_argument("--matrices", help="also write TCFM matrices CSV")
    i.add_argument("--alphas", help="also write SAFM attention weights CSV")
    i.set_defaults(func=cmd_infer)

    e = sub.add_parser("eval", help="score predictions against a ground-truth sequence")
    e.add_argument("pred", help="parameter CSV from infer, or a sequence file")
    e.add_argument("gt")
    e.add_argument("-o", "--output", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="run every registered gradient check")
    c.add_argument("--trials", type=int, default=25)
    c.add_argument("--tol", type=float, default=1e-4)
    c.add_argument("--only", nargs="*")
    c.add_argument("--skip-end-to-end", action="store_true")
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate-apm", help="accel error with APM on vs off over seeded random models")
    a.add_argument("--seeds", type=int, default=20)
    a.add_argument("--length", type=int, default=60)
    a.add_argument("-o", "--output")
    a.set_defaults(func=cmd_ablate)

    t = sub.add_parser("train-overfit", help="fit a desk-scale model to synthetic windows")
    t.add_argument("--steps", type=int, default=2000)
    t.add_argument("--lr", type=float, default=1e-3)
    t.add_argument("--optimizer", choices=("gd", "adam"), default="adam")
    t.add_argument("--patience", type=int, default=50)
    t.add_argument("--target-ratio", type=float, default=None)
    t.add_argument("--sequences", type=int, default=5)
    t.add_argument("--length", type=int, default=40)
    t.add_argument("-o", "--output", help="write the trained checkpoint")
    t.add_argument("--curve", help="write the loss curve CSV")
    t.set_defaults(func=cmd_train)

    pl = sub.add_parser("plot", help="per-frame metric CSV -> SVG line chart")
    pl.add_argument("csv")
    pl.add_argument("-o", "--output", required=True)
    pl.add_argument("--columns", nargs="*")
    pl.add_argument("--title")
    pl.set_defaults(func=cmd_plot)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        return args.func(args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except nc.NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, ValueError, OSError) as exc:
        print(f"validation failure: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
