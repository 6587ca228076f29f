"""Ablation grid over head-weighting modes.

For every seed, one network is trained for ``epochs_fixed`` epochs under
the initial weights, then branched into four continuations of
``epochs_auto`` epochs each:

* ``fixed-equal``: alpha = 1/4 per head
* ``fixed-optimal``: a hand-picked alpha emphasizing the final head
* ``auto``: REINFORCE weight search
* ``norl``: uniform random weight moves, best replica kept

Every branch is scored on the test split by the mean per-case Dice of the
fine network's pathology class in original image coordinates. Modes are
compared across seeds with a paired t-test.
"""

import csv
import os

import numpy as np

from . import das
from . import pipeline as pl
from .metrics import evaluate_case, paired_t_test, write_metrics_csv
from .synthdata import generate_cases, split_cases

MODES = ("fixed-equal", "fixed-optimal", "auto", "norl")
COMPARISONS = (("auto", "fixed-equal"), ("auto", "fixed-optimal"), ("auto", "norl"), ("auto", "auto"))
SUMMARY_HEADER = ["row", "mode", "seed", "target_dice", "myo_dice", "reference", "delta", "t_stat", "p_value"]


def seed_list(master, n):
    return [int(master) * 1000 + i for i in range(n)]


def make_splits(run):
    ex = run.experiment
    cases = generate_cases(ex.n_train + ex.n_val + ex.n_test, seed=run.seed, params=run.phantom)
    return split_cases(cases, counts=(ex.n_train, ex.n_val, ex.n_test))


def score(net, data, role):
    """Per-case target-class and myocardium Dice in image space, plus metric rows."""
    _, _, full = pl.predict_cases(net, data)
    gts = [pl.ROLE_MAPS[role][lab] for lab in data.full_labels]
    rows = []
    for cid, p, g in zip(data.case_ids, full, gts):
        rows.extend(evaluate_case(cid, p, g, pl.ROLE_CLASSES[role]))
    target = [r.dice for r in rows if r.cls == pl.ROLE_CLASSES[role][1][1]]
    myo = [r.dice for r in rows if r.cls == "myocardium"]
    return float(np.mean(target)), float(np.mean(myo)), rows


def run_seed(cfg, train, val, test, seed, log=None):
    """All four branches for one seed.

    Returns ``{mode: (target, myo, rows, trace, mask_range)}`` where
    ``mask_range`` is the (min, max) attention-mask value seen in training.
    """
    alpha0 = das.softmax_weights(das.BETA_INIT)
    base_net, base_adam = pl.train_fixed_phase(cfg, train, seed, alpha0, cfg.epochs_fixed)
    out = {}
    for mode in MODES:
        net, adam = base_net.clone(), base_adam.copy()
        trace = []
        if mode.startswith("fixed"):
            alpha = [0.25] * 4 if mode == "fixed-equal" else pl.OPTIMAL_ALPHA
            net, adam = pl.train_fixed_phase(cfg, train, seed, alpha, cfg.epochs_auto, net=net, adam=adam, tag=2)
        else:
            net, adam, _, trace = pl.run_search(cfg, net, adam, train, val, seed, mode)
        target, myo, rows = score(net, test, train.role)
        out[mode] = (target, myo, rows, trace, (net.mask_min, net.mask_max))
        if log:
            log(f"seed {seed} {mode}: target dice {target:.4f} myocardium dice {myo:.4f}")
    return out


def summarize(results, seeds):
    """Summary rows: one per (mode, seed), one mean per mode, one per comparison."""
    rows = []
    per_mode = {m: np.array([results[s][m][0] for s in seeds]) for m in MODES}
    for s in seeds:
        for m in MODES:
            t, myo = results[s][m][:2]
            rows.append(["run", m, s, t, myo, "", "", "", ""])
    for m in MODES:
        myo = float(np.mean([results[s][m][1] for s in seeds]))
        rows.append(["mean", m, "", float(per_mode[m].mean()), myo, "", "", "", ""])
    for a, b in COMPARISONS:
        delta = float(per_mode[a].mean() - per_mode[b].mean())
        if len(seeds) >= 2:
            t, p = paired_t_test(per_mode[a], per_mode[b])
        else:
            t, p = float("nan"), float("nan")
        rows.append(["compare", a, "", float(per_mode[a].mean()), "", b, delta, t, p])
    return rows


def _fmt(v):
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def write_summary(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def read_summary(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_experiment(run, n_seeds, out_dir, log=None):
    """Run the grid and write summary.csv, metrics.csv and per-seed traces."""
    cfg = run.pipeline
    role = run.experiment.role
    splits = make_splits(run)
    train, val, test = (pl.build_fine_data(splits[k], cfg, role) for k in ("train", "val", "test"))
    seeds = seed_list(run.seed, n_seeds)
    results = {}
    os.makedirs(out_dir, exist_ok=True)
    metric_rows = []
    for s in seeds:
        results[s] = run_seed(cfg, train, val, test, s, log)
        for m in MODES:
            for r in results[s][m][2]:
                r.case_id = f"{m}/{s}/{r.case_id}"
                metric_rows.append(r)
            trace = results[s][m][3]
            if trace:
                das.write_trace(os.path.join(out_dir, f"trace_{m}_{s}.csv"), trace)
    summary = summarize(results, seeds)
    write_summary(summary, os.path.join(out_dir, "summary.csv"))
    write_metrics_csv(metric_rows, os.path.join(out_dir, "metrics.csv"))
    return summary, results
