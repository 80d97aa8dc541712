"""Component ablation on the synthetic generator.

Trains the four component settings (without token mining, without token
encoding, without token decoding, full model) and prints a comparison table.

    python scripts/ablation_table.py --brightness-jitter 0.3 --noise-std 0.05
"""

import argparse
import logging
import time

from threadpoolctl import threadpool_limits

from vct.data import SyntheticConfig, generate_synthetic
from vct.model import ModelConfig
from vct.train import TrainConfig, ablation_table, run_ablations


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--test", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--brightness-jitter", type=float, default=0.3)
    ap.add_argument("--noise-std", type=float, default=0.05)
    ap.add_argument("--out", default=None, help="optional file for the table")
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    scfg = SyntheticConfig(seed=args.seed, brightness_jitter=args.brightness_jitter, noise_std=args.noise_std)
    train = generate_synthetic(scfg, args.train)
    test = generate_synthetic(scfg, args.test, start=args.train)
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        results = run_ablations(ModelConfig(), train, None, test, TrainConfig(epochs=args.epochs, seed=args.seed))
    table = ablation_table(results)
    print(table)
    print(f"seconds={time.perf_counter() - t0:.1f}")
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(table)


if __name__ == "__main__":
    main()
