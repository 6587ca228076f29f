"""Numba vs numpy timings for the hot kernels, plus one training step per backend.

    python benchmarks/bench_kernels.py [--repeat 20] [--no-step]

Kernel rows compare ``kernels.nb_*`` against ``kernels.np_*`` on the shapes a
48x48 fine network sees with batch 16. The training-step rows rerun this
script in a child process with AWSUP_NUMBA=1 and =0, because the backend is
bound when ``awsup.kernels`` is imported.
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from awsup import kernels


def best_of(fn, args, repeat):
    fn(*args)  # warm up / compile
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        best = min(best, time.perf_counter() - t0)
    return best


def kernel_cases(rng):
    x = rng.normal(size=(16, 16, 48, 48))
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = rng.normal(size=(9, 16, 16, 48, 48))
    maps = x.reshape(-1, 48, 48)
    _, idx = kernels.np_maxpool2(maps)
    half = rng.normal(size=(256, 24, 24))
    a = np.argwhere(rng.random((96, 96)) < 0.05)
    b = np.argwhere(rng.random((96, 96)) < 0.05)
    votes = rng.integers(0, 4, size=(3, 16 * 48 * 48))
    return [
        ("im2col 3x3", "im2col", (xp, 3, 48, 48)),
        ("col2im 3x3", "col2im", (cols, 3)),
        ("maxpool2", "maxpool2", (maps,)),
        ("maxpool2 backward", "maxpool2_backward", (half, idx)),
        ("upsample2x", "upsample2x", (half,)),
        ("upsample2x backward", "upsample2x_backward", (maps,)),
        ("nearest distances", "nearest_distances", (a, b)),
        ("vote counts", "vote_counts", (votes, 4)),
    ]


def bench_kernels(repeat):
    if not kernels.HAVE_NUMBA:
        print("numba is not installed; only the numpy path is available")
        return
    rng = np.random.default_rng(0)
    print(f"{'kernel':<22}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}")
    for label, name, args in kernel_cases(rng):
        t_np = best_of(getattr(kernels, "np_" + name), args, repeat)
        t_nb = best_of(getattr(kernels, "nb_" + name), args, repeat)
        print(f"{label:<22}{t_np * 1e3:>10.2f}{t_nb * 1e3:>10.2f}{t_np / t_nb:>8.1f}x")


def train_step_time(repeat):
    """Best forward+backward+Adam time for one batch of 16 on the fine network."""
    from awsup import autodiff as ad
    from awsup import networks as nw
    from awsup.losses import LossConfig, hybrid_layer_loss, weighted_total_loss

    rng = np.random.default_rng(1)
    net = nw.UNet(nw.fine_config(base_width=4), seed=0)
    x = rng.normal(size=(2, 16, 48, 48))
    y = rng.integers(0, 3, size=(16, 48, 48))
    params = list(net.params.values())
    state = ad.AdamState(params)

    def step():
        with ad.Tape() as tape:
            heads = [hybrid_layer_loss(h, y, LossConfig()) for h in net.forward(x)]
            tape.backward(weighted_total_loss(heads, [0.25] * 4))
        ad.adam_step(params, [p.grad for p in params], state)

    return best_of(step, (), repeat)


def bench_step(repeat):
    times = {}
    for flag in ("1", "0"):
        env = dict(os.environ, AWSUP_NUMBA=flag)
        out = subprocess.run([sys.executable, __file__, "--child-step", "--repeat", str(repeat)],
                             env=env, capture_output=True, text=True, check=True)
        times[flag] = float(out.stdout.strip())
    print(f"\ntraining step (batch 16, 48x48): numpy {times['0'] * 1e3:.1f} ms, "
          f"numba {times['1'] * 1e3:.1f} ms, speedup {times['0'] / times['1']:.2f}x")


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-step", action="store_true", help="skip the training-step comparison")
    ap.add_argument("--child-step", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args(argv)
    if args.child_step:
        print(train_step_time(max(5, args.repeat // 4)))
        return
    bench_kernels(args.repeat)
    if not args.no_step:
        bench_step(args.repeat)


if __name__ == "__main__":
    main()
