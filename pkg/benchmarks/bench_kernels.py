"""Compare the numba kernels against their numpy twins.

Usage: python3 benchmarks/bench_kernels.py [--rows 512] [--cols 256] [--repeat 50]

Prints one line per kernel with the median wall time of each backend and the
speed-up. Also times a short training run under each backend in a subprocess
(the backend is fixed at import, so each needs its own interpreter).
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from cmal import _kernels


def median_time(fn, repeat):
    fn()  # warm-up, includes numba compilation
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


TRAIN_SNIPPET = """
import time
from cmal.config import ModelConfig, TrainConfig
from cmal.corpus import SynthSpec, TagCatalog, Vocabulary, parse_pair, synth_pairs
from cmal.trainer import TrainState, prepare_examples, pretrain
import json
records, _, names, _ = synth_pairs(SynthSpec(64, 12, 0, 32))
vocab = Vocabulary.from_texts(r["caption"] for r in records)
pairs = [parse_pair(json.dumps(r), vocab) for r in records]
ex = prepare_examples(pairs, None, TagCatalog(names))
m = ModelConfig(d_v=32, hidden={hidden}, ffn={ffn}, vocab_size=len(vocab), num_tags=len(names))
st = TrainState.fresh(TrainConfig(steps=1, model=m))
pretrain(ex, st)  # warm-up
st.config.steps = 1 + {steps}
t0 = time.perf_counter()
pretrain(ex, st)
print(time.perf_counter() - t0)
"""


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--rows", type=int, default=512)
    ap.add_argument("--cols", type=int, default=256)
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--train-steps", type=int, default=20)
    ap.add_argument("--hidden", type=int, default=64)
    args = ap.parse_args()

    if _kernels.NUMBA_KERNELS is None:
        sys.exit("numba is not importable")
    rng = np.random.default_rng(0)
    x = rng.normal(size=(args.rows, args.cols))
    dy = rng.normal(size=x.shape)
    g, b = rng.normal(size=args.cols), rng.normal(size=args.cols)

    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speed-up':>10}")
    for name, make in (
        ("softmax_fwd", lambda K: lambda: K.softmax_fwd(x)),
        ("softmax_bwd", lambda K: (lambda p: lambda: K.softmax_bwd(dy, p))(K.softmax_fwd(x))),
        ("log_softmax_fwd", lambda K: lambda: K.log_softmax_fwd(x)),
        ("layer_norm_fwd", lambda K: lambda: K.layer_norm_fwd(x, g, b, 1e-5)),
        ("layer_norm_bwd", lambda K: (lambda o: lambda: K.layer_norm_bwd(dy, o[1], o[2], g))(K.layer_norm_fwd(x, g, b, 1e-5))),
        ("gelu_fwd", lambda K: lambda: K.gelu_fwd(x)),
        ("gelu_bwd", lambda K: lambda: K.gelu_bwd(dy, x)),
    ):
        t_np = median_time(make(_kernels.NUMPY_KERNELS), args.repeat)
        t_nb = median_time(make(_kernels.NUMBA_KERNELS), args.repeat)
        print(f"{name:<18}{t_np * 1e3:>10.3f}{t_nb * 1e3:>10.3f}{t_np / t_nb:>9.2f}x")

    code = TRAIN_SNIPPET.format(hidden=args.hidden, ffn=4 * args.hidden, steps=args.train_steps)
    res = {}
    for flag in ("0", "1"):
        out = subprocess.run([sys.executable, "-c", code], env=dict(os.environ, CMAL_NUMBA=flag), capture_output=True, text=True, check=True)
        res[flag] = float(out.stdout.strip())
    print(f"training {args.train_steps} steps (H={args.hidden}): numpy {res['0']:.2f} s, numba {res['1']:.2f} s, speed-up {res['0'] / res['1']:.2f}x")


if __name__ == "__main__":
    main()
