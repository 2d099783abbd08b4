"""Time every hot kernel on its numba and numpy path, plus one full
training run under each backend.

    python benchmarks/bench_kernels.py [--repeat 200] [--skip-train]

Kernel timings exclude JIT compilation (one warm-up call first). The
end-to-end run starts a fresh interpreter with SETADAPT_NUMBA set, because
the backend is bound at import time.
"""

import argparse
import os
import subprocess
import sys
import time
import timeit

import numpy as np

from setadapt import kernels as K

TRAIN_SNIPPET = """
import time, numpy as np
from setadapt.adaptors import init_adaptor
from setadapt.backbone import BackboneParams
from setadapt.episodes import gen_synthetic, make_splits
from setadapt.model import FewShotModel
from setadapt.training import TrainConfig, train
rng = np.random.default_rng(0)
seen, val, _ = make_splits(gen_synthetic(40, 40, 32, 0.6, 1.0, rng), 0.5, 0.25, rng)
model = FewShotModel(BackboneParams.init([32, 64, 32], rng), init_adaptor("{kind}", 32, rng))
train(TrainConfig(epochs=1, episodes_per_epoch=5, val_tasks=5), seen, val, model)  # warm-up / JIT
t = time.perf_counter()
train(TrainConfig(epochs=2, episodes_per_epoch=50, val_tasks=50), seen, val, model)
print(time.perf_counter() - t)
"""


def cases(rng):
    x = rng.standard_normal((80, 32))
    g = rng.standard_normal((80, 32))
    gain, bias = rng.standard_normal((1, 32)), rng.standard_normal((1, 32))
    sm = K.softmax_rows_numpy(x)
    _, xhat, inv = K.layer_norm_numpy(x, gain, bias, 1e-5)
    _, idx = K.complement_max_numpy(x)
    seq = rng.standard_normal((5, 32))
    wx, wh, b = rng.standard_normal((32, 128)) * 0.1, rng.standard_normal((32, 128)) * 0.1, np.zeros((1, 128))
    hs, cs, acts = K.lstm_forward_numpy(seq, wx, wh, b)
    dh = rng.standard_normal((5, 32))
    return {
        "softmax_rows": (x,),
        "softmax_rows_backward": (sm, g),
        "layer_norm": (x, gain, bias, 1e-5),
        "layer_norm_backward": (g, xhat, inv, gain),
        "sq_dists": (x, x[:5]),
        "complement_max": (x,),
        "complement_max_backward": (g, idx, 80),
        "lstm_forward": (seq, wx, wh, b),
        "lstm_backward": (dh, seq, wx, wh, hs, cs, acts),
    }


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'kernel':26s} {'numpy us':>10s} {'numba us':>10s} {'speedup':>8s}")
    for name, args in cases(rng).items():
        row = []
        for path in ("numpy", "numba"):
            fn = getattr(K, f"{name}_{path}")
            fn(*args)
            best = min(timeit.repeat(lambda: fn(*args), number=repeat, repeat=5)) / repeat
            row.append(best * 1e6)
        print(f"{name:26s} {row[0]:10.1f} {row[1]:10.1f} {row[0] / row[1]:8.2f}")


def bench_training(kind):
    out = {}
    for flag in ("0", "1"):
        env = dict(os.environ, SETADAPT_NUMBA=flag)
        res = subprocess.run([sys.executable, "-c", TRAIN_SNIPPET.format(kind=kind)], env=env,
                             capture_output=True, text=True, check=True)
        out["numba" if flag == "1" else "numpy"] = float(res.stdout.strip())
    print(f"train {kind:12s} numpy {out['numpy']:.2f}s  numba {out['numba']:.2f}s  speedup {out['numpy'] / out['numba']:.2f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--skip-train", action="store_true")
    args = ap.parse_args()
    if not K.HAVE_NUMBA:
        sys.exit("numba is not installed")
    t0 = time.perf_counter()
    bench_kernels(args.repeat)
    if not args.skip_train:
        for kind in ("transformer", "bilstm", "deepsets"):
            bench_training(kind)
    print(f"total {time.perf_counter() - t0:.1f}s")


if __name__ == "__main__":
    main()
