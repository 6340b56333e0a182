"""Compare the compiled and pure-Python training kernels on one window.

    python benchmarks/bench_kernels.py --baskets 300 --d 32 --epochs 3
"""

import argparse
import time

import numpy as np

from omba import kernels
from omba.model import Hyperparameters, Window
from omba.ome import OnlineTrainer
from omba.synthetic import StreamConfig, planted_stream


def run(backend, window, hp, threads=1):
    trainer = OnlineTrainer(hp, backend=backend, threads=threads)
    start = time.perf_counter()
    rep = trainer.train_window(window)
    return time.perf_counter() - start, rep.tasks, trainer.store


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--baskets", type=int, default=300)
    ap.add_argument("--d", type=int, default=32)
    ap.add_argument("--epochs", type=int, default=3)
    ap.add_argument("--threads", type=int, default=4, help="threads for the parallel compiled run")
    args = ap.parse_args(argv)

    stream = planted_stream(StreamConfig(n_baskets=args.baskets, n_windows=1, seed=0))
    window = Window(0, tuple(stream.baskets), 0.0, 86400.0)
    hp = Hyperparameters(d=args.d, epochs=args.epochs)

    results = {}
    for name in sorted(kernels.BACKENDS):
        results[name] = run(name, window, hp)
    if "compiled" in kernels.BACKENDS and args.threads > 1:
        results[f"compiled x{args.threads}"] = run("compiled", window, hp, args.threads)

    base = results["python"][0]
    print(f"{'backend':<14} {'seconds':>9} {'tasks/s':>11} {'speedup':>8}")
    for name, (secs, tasks, _) in results.items():
        print(f"{name:<14} {secs:>9.3f} {tasks / secs:>11.0f} {base / secs:>7.1f}x")
    if "compiled" in results:
        diff = np.max(np.abs(results["python"][2].vectors - results["compiled"][2].vectors))
        print(f"max |python - compiled| over embeddings: {diff:.1e}")


if __name__ == "__main__":
    main()
