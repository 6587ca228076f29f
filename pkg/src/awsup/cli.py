"""Command-line entry points.

Exit codes: 0 success, 2 configuration error, 3 numeric failure, 4 I/O error.
"""

import argparse
import dataclasses
import logging
import os
import sys

import numpy as np

from . import das
from . import networks as nw
from . import pipeline as pl
from .config import load_config
from .errors import ConfigError, DatasetError, GenerationError, TrainingError
from .experiment import run_experiment
from .metrics import evaluate_case, write_metrics_csv
from .synthdata import generate_cases, read_dataset, split_cases, write_dataset, write_pgm

log = logging.getLogger("awsup")

STAGES = {"coarse": None, "fine-scar": "scar", "fine-pathology": "pathology"}


def write_manifest(out_dir, command, run, artifacts, extra=()):
    path = os.path.join(out_dir, "run_manifest.txt")
    with open(path, "w") as fh:
        fh.write(f"command = {command}\n")
        for k, v in extra:
            fh.write(f"{k} = {v}\n")
        fh.write("[config]\n")
        fh.write(run.to_text())
        fh.write("[artifacts]\n")
        for a in artifacts:
            fh.write(os.path.relpath(a, out_dir) + "\n")
    return path


# ---------------------------------------------------------------------------


def cmd_generate(args):
    run = load_config(args.config)
    if args.size % 8:
        raise ConfigError(f"--size {args.size} is not divisible by 8")
    params = dataclasses.replace(run.phantom, size=args.size)
    if args.size < run.pipeline.coarse_size:
        raise ConfigError(f"--size {args.size} is smaller than coarse_size {run.pipeline.coarse_size}")
    cases = generate_cases(args.cases, seed=args.seed, params=params)
    manifest = write_dataset(split_cases(cases), args.out)
    log.info("wrote %d cases to %s", len(cases), args.out)
    return manifest


def _fine_meta(cfg, role, mode, beta):
    return {"kind": "fine", "role": role, "mode": mode, "margin": cfg.margin,
            "fine_size": cfg.fine_size, "beta": ",".join(repr(float(b)) for b in beta)}


def cmd_train(args):
    run = load_config(args.config)
    cfg = run.pipeline
    if args.stage not in STAGES:
        raise ConfigError(f"unknown stage {args.stage!r}")
    splits = read_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    artifacts = []
    if args.stage == "coarse":
        model = pl.coarse_train(splits["train"], cfg)
        for k, net in enumerate((model.net1, model.net2), start=1):
            path = os.path.join(args.out, f"coarse{k}.ckpt")
            nw.save_checkpoint(net, path, {"kind": f"coarse{k}", "margin": cfg.margin,
                                           "coarse_size": cfg.coarse_size, "crop_size": cfg.fine_size})
            artifacts.append(path)
    else:
        role = STAGES[args.stage]
        train = pl.build_fine_data(splits["train"], cfg, role)
        val = pl.build_fine_data(splits["val"], cfg, role)

        def progress(t, rows):
            best = max(rows, key=lambda r: (r[14], -r[1]))
            log.info("epoch %d: best replica %d, val dice %.4f", t, best[1], best[14])

        res = pl.fine_train(cfg, train, val, mode=args.mode, on_epoch=progress)
        path = os.path.join(args.out, f"fine-{role}.ckpt")
        nw.save_checkpoint(res.net, path, _fine_meta(cfg, role, args.mode, res.beta))
        artifacts.append(path)
        if args.mode != "fixed":
            tpath = os.path.join(args.out, "trace.csv")
            das.write_trace(tpath, res.trace)
            artifacts.append(tpath)
    write_manifest(args.out, f"train --stage {args.stage} --mode {args.mode}", run, artifacts)
    return artifacts


def _load_fine(paths):
    by_role = {}
    for p in paths:
        net, meta = nw.load_checkpoint(p)
        if meta.get("kind") != "fine":
            raise ConfigError(f"{p} is not a fine-stage checkpoint")
        by_role.setdefault(meta["role"], []).append((net, meta))
    return by_role


def _role_predictions(models, cases, lv_masks):
    """Image-space label maps for one role, voting when several models are given."""
    fulls, probas, datas = [], [], []
    for net, meta in models:
        cfg = pl.PipelineConfig(margin=int(meta["margin"]), fine_size=int(meta["fine_size"]))
        data = pl.build_fine_data(cases, cfg, meta["role"], lv_masks)
        proba, crop, full = pl.predict_cases(net, data)
        fulls.append(full)
        probas.append(proba)
        datas.append(data)
    if len(models) == 1:
        return fulls[0]
    out = []
    for i, case in enumerate(cases):
        # vote in image space; probabilities are pasted with the same geometry
        preds = np.stack([f[i] for f in fulls])
        probs = np.stack([_paste_proba(p[i], d.rois[i], case.labels.shape) for p, d in zip(probas, datas)])
        out.append(pl.ensemble_vote(preds, probs).astype(np.uint8))
    return out


def _paste_proba(proba, roi, shape):
    out = np.zeros((proba.shape[0],) + tuple(shape))
    out[0] = 1.0
    out[(slice(None),) + roi.slices()] = pl.resize_nearest(proba, roi.shape)
    return out


def cmd_eval(args):
    run = load_config(args.config)
    splits = read_dataset(args.data)
    cases = splits[args.split]
    if not cases:
        raise DatasetError(f"{args.data}: split {args.split!r} is empty")
    by_role = _load_fine(args.checkpoints)
    if not args.ensemble and any(len(v) > 1 for v in by_role.values()):
        raise ConfigError("several checkpoints for one role need --ensemble")
    lv_masks = None
    if args.coarse:
        (n1, m1), (n2, _) = (nw.load_checkpoint(p) for p in args.coarse)
        model = pl.CoarseModel(n1, n2, int(m1["margin"]), int(m1["coarse_size"]), int(m1["crop_size"]))
        lv_masks = pl.coarse_stage(model, cases)
    preds = {role: _role_predictions(models, cases, lv_masks) for role, models in sorted(by_role.items())}
    os.makedirs(os.path.join(args.out, "masks"), exist_ok=True)
    rows, artifacts = [], []
    for i, case in enumerate(cases):
        if len(preds) == 2:
            merged = pl.dual_merge(preds["scar"][i], preds["pathology"][i])
            gt, classes = case.labels, pl.MERGED_CLASSES
        else:
            role = next(iter(preds))
            merged = preds[role][i]
            gt, classes = pl.ROLE_MAPS[role][case.labels], pl.ROLE_CLASSES[role]
        rows.extend(evaluate_case(case.case_id, merged, gt, classes))
        mpath = os.path.join(args.out, "masks", f"{case.case_id}.pgm")
        write_pgm(mpath, np.asarray(merged, dtype=np.uint8))
        artifacts.append(mpath)
    mpath = os.path.join(args.out, "metrics.csv")
    write_metrics_csv(rows, mpath)
    write_manifest(args.out, "eval", run, [mpath] + artifacts,
                   [("checkpoints", " ".join(args.checkpoints)), ("ensemble", args.ensemble)])
    return rows


def best_alpha_series(trace_rows):
    """Per epoch, the alpha of the replica with the best validation score."""
    epochs = {}
    for r in trace_rows:
        epochs.setdefault(r[0], []).append(r)
    out = []
    for e in sorted(epochs):
        best = max(epochs[e], key=lambda r: (r[14], -r[1]))
        out.append((e, best[10:14]))
    return out


def render_svg(series, width=480, height=300, pad=40):
    colors = ("#1f77b4", "#ff7f0e", "#2ca02c", "#d62728")
    n = len(series)
    x_span = max(1, n - 1)

    def xy(i, a):
        return pad + (width - 2 * pad) * i / x_span, height - pad - (height - 2 * pad) * a

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
             f'viewBox="0 0 {width} {height}">',
             f'<rect x="0" y="0" width="{width}" height="{height}" fill="white"/>',
             f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>',
             f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>',
             f'<text x="{width / 2}" y="{height - 8}" text-anchor="middle" font-size="12">epoch</text>',
             f'<text x="12" y="{height / 2}" font-size="12" transform="rotate(-90 12 {height / 2})">alpha</text>']
    for layer in range(4):
        pts = [xy(i, alphas[layer]) for i, (_, alphas) in enumerate(series)]
        if len(pts) == 1:
            pts.append((width - pad, pts[0][1]))
        coords = " ".join(f"{x:.3f},{y:.3f}" for x, y in pts)
        parts.append(f'<polyline fill="none" stroke="{colors[layer]}" stroke-width="2" '
                     f'data-layer="{layer + 1}" points="{coords}"/>')
        parts.append(f'<text x="{width - pad + 4}" y="{pts[-1][1]:.3f}" font-size="10" '
                     f'fill="{colors[layer]}">a{layer + 1}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def cmd_plot(args):
    rows = das.read_trace(args.trace)
    if not rows:
        raise DatasetError(f"{args.trace} has no rows")
    svg = render_svg(best_alpha_series(rows))
    with open(args.out, "w") as fh:
        fh.write(svg)
    return args.out


def cmd_experiment(args):
    run = load_config(args.config)
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    out = args.out
    summary, _ = run_experiment(run, args.seeds, out, log=log.info)
    arts = [os.path.join(out, "summary.csv"), os.path.join(out, "metrics.csv")]
    arts += sorted(os.path.join(out, f) for f in os.listdir(out) if f.startswith("trace_"))
    write_manifest(out, f"experiment --seeds {args.seeds}", run, arts, [("threads", "env AWSUP_THREADS")])
    return summary


# ---------------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="awsup", description="Auto-weighted deep supervision on cardiac phantoms.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a phantom dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--cases", type=int, default=100)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=96)
    g.add_argument("--config")
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="train a coarse or fine stage")
    t.add_argument("--data", required=True)
    t.add_argument("--config")
    t.add_argument("--stage", choices=sorted(STAGES), required=True)
    t.add_argument("--mode", choices=("fixed", "auto", "norl"), default="auto")
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate fine checkpoints on a split")
    e.add_argument("--data", required=True)
    e.add_argument("--checkpoints", nargs="+", required=True)
    e.add_argument("--coarse", nargs=2, metavar=("NET1", "NET2"),
                   help="coarse cascade checkpoints; default uses ground-truth LV regions")
    e.add_argument("--ensemble", action="store_true")
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--config")
    e.add_argument("--out", required=True)
    e.set_defaults(fn=cmd_eval)

    pl_ = sub.add_parser("plot", help="SVG of head weights over epochs")
    pl_.add_argument("--trace", required=True)
    pl_.add_argument("--out", required=True)
    pl_.set_defaults(fn=cmd_plot)

    x = sub.add_parser("experiment", help="ablation grid over weighting modes")
    x.add_argument("--config")
    x.add_argument("--seeds", type=int, default=5)
    x.add_argument("--out", default="experiment")
    x.set_defaults(fn=cmd_experiment)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        args.fn(args)
    except (TrainingError, GenerationError, FloatingPointError) as exc:
        print(f"error: numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DatasetError, OSError) as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: configuration: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
