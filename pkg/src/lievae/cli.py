"""Command-line front end.

Four subcommands: generate-data renders a labeled shape corpus to one
file, train runs the full two-phase curriculum into a run directory,
diagnose measures pair deviations for a saved checkpoint on a dataset,
and report distills a finished run directory into plot-ready tables.

Exit codes: 0 success, 1 file-system failure, 2 validation or config
failure, 3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import diagnostics as diag
from . import toydata, trainer
from .errors import NumericalAbort
from .seeding import stream_rng


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lievae",
        description="two-phase Lie-group VAE: data, training, diagnostics")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate-data", help="render a shape dataset file")
    gen.add_argument("--count", type=int, default=2048)
    gen.add_argument("--side", type=int, default=16)
    gen.add_argument("--seed", type=int, default=7)
    gen.add_argument("--out", required=True)

    tr = sub.add_parser("train", help="run both training phases")
    tr.add_argument("--config", required=True, help="JSON config file")
    tr.add_argument("--out-dir", required=True)

    dg = sub.add_parser("diagnose",
                        help="measure pair deviations for a checkpoint")
    dg.add_argument("--checkpoint", required=True)
    dg.add_argument("--data", required=True)
    dg.add_argument("--pairs", default="all",
                    help="'all' or a single pair as 'i,j'")
    dg.add_argument("--out", default=None,
                    help="CSV path; stdout when omitted")

    rp = sub.add_parser("report",
                        help="summarize a run directory into tables")
    rp.add_argument("--run-dir", required=True)
    rp.add_argument("--out", required=True, help="output directory")
    return parser


def _cmd_generate(args) -> int:
    dataset = toydata.generate_dataset(args.count, args.side, args.seed)
    digest = toydata.save_dataset(dataset, args.out)
    print(f"wrote {dataset.count} images ({dataset.side}x{dataset.side}) "
          f"to {args.out}")
    print(f"sha256 {digest}")
    return 0


def _cmd_train(args) -> int:
    with open(args.config) as fh:
        doc = json.load(fh)
    if not isinstance(doc, dict):
        raise ValueError("config file must hold a JSON object")
    config = trainer.TrainConfig.from_dict(doc)
    report = trainer.run_curriculum(config, args.out_dir)
    metrics = report["metrics"]
    print(f"run complete: reconstruction {metrics['reconstruction']:.4f}, "
          f"fvm {metrics['fvm']}, artifacts in {args.out_dir}")
    return 0


def _parse_pairs(text: str, d: int):
    if text == "all":
        return None
    parts = text.split(",")
    if len(parts) != 2:
        raise ValueError(f"--pairs must be 'all' or 'i,j', got {text!r}")
    i, j = (int(p) for p in parts)
    if not 0 <= i < j < d:
        raise ValueError(f"pair ({i}, {j}) needs 0 <= i < j < {d}")
    return [(i, j)]


def _cmd_diagnose(args) -> int:
    model, _, cal, config = trainer.load_run_checkpoint(args.checkpoint)
    dataset = toydata.load_dataset(args.data)
    if dataset.side != model.dims.side:
        raise ValueError(
            f"dataset side {dataset.side} does not match checkpoint side "
            f"{model.dims.side}")
    pairs = _parse_pairs(args.pairs, model.dims.latent_dim)
    x = dataset.pixels01()[:min(config.diag_batch, dataset.count)]
    rng = stream_rng(config.seed, "diagnose")
    eps = rng.standard_normal((x.shape[0], model.dims.latent_dim))
    noise = np.clip(rng.random((x.shape[0], model.dims.categories)),
                    trainer.GUMBEL_CLIP, 1.0 - trainer.GUMBEL_CLIP)
    d_vals, delta_vals = diag.evaluate_pairs(model, x, eps, noise, pairs)
    if pairs is None:
        d_lat = model.dims.latent_dim
        pairs = [(a, b) for a in range(d_lat) for b in range(a + 1, d_lat)]

    c_now = cal.c if (cal is not None and cal.calibrated()) else float("nan")
    lines = ["i,j,D,Delta,r,R,U"]
    for k, (i, j) in enumerate(pairs):
        d_k, delta_k = float(d_vals[k]), float(delta_vals[k])
        r = delta_k / (d_k + config.eps_num)
        stab = delta_k / (c_now * d_k + config.eps_num) \
            if np.isfinite(c_now) else float("nan")
        u = diag.manifold_sensitivity(model, x[0], i, j)
        lines.append(f"{i},{j},{d_k!r},{delta_k!r},{r!r},{stab!r},{u!r}")
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text)
        print(f"wrote {len(pairs)} pair rows to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def _read_phases(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _cmd_report(args) -> int:
    report_path = os.path.join(args.run_dir, "report.json")
    phases_path = os.path.join(args.run_dir, "phases.csv")
    with open(report_path) as fh:
        report = json.load(fh)
    rows = _read_phases(phases_path)
    os.makedirs(args.out, exist_ok=True)

    c_emp = report.get("calibration", {}).get("c_emp")
    fallback_c = float(c_emp) if c_emp is not None else float("nan")

    def fval(row, key):
        return float(row[key])

    with open(os.path.join(args.out, "panel_deformation.csv"), "w") as fh:
        fh.write("step,delta,c_times_d\n")
        for row in rows:
            c = fval(row, "c")
            if not np.isfinite(c):
                c = fallback_c
            fh.write(f"{int(float(row['step']))},{fval(row, 'delta_fresh')!r},"
                     f"{c * fval(row, 'd_fresh')!r}\n")
    with open(os.path.join(args.out, "panel_stability.csv"), "w") as fh:
        fh.write("step,r_bar,boundary\n")
        for row in rows:
            fh.write(f"{int(float(row['step']))},{fval(row, 'r_bar')!r},1.0\n")
    with open(os.path.join(args.out, "panel_reconstruction.csv"), "w") as fh:
        fh.write("step,recon\n")
        for row in rows:
            fh.write(f"{int(float(row['step']))},{fval(row, 'recon')!r}\n")

    metrics = report.get("metrics", {})
    cal = report.get("calibration", {})
    with open(os.path.join(args.out, "summary.txt"), "w") as fh:
        fh.write(f"status: {report.get('status')}\n")
        fh.write(f"reconstruction: {metrics.get('reconstruction')}\n")
        fh.write(f"fvm: {metrics.get('fvm')}\n")
        fh.write(f"c_emp: {cal.get('c_emp')}\n")
        fh.write(f"c_final: {cal.get('c_final')}\n")
    print(f"wrote 3 panel tables and summary.txt to {args.out}")
    return 0


_COMMANDS = {
    "generate-data": _cmd_generate,
    "train": _cmd_train,
    "diagnose": _cmd_diagnose,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except NumericalAbort as err:
        print(f"numerical abort: {err}", file=sys.stderr)
        return 3
    except OSError as err:
        print(f"i/o failure: {err}", file=sys.stderr)
        return 1
    except (ValueError, RuntimeError, KeyError) as err:
        print(f"invalid input: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
