"""Desk-scale training run on the synthetic generator.

Trains full VcT with the reference optimiser settings on 200 synthetic
pairs, then reports train and held-out metrics.

    python scripts/desk_run.py --out runs/desk
"""

import argparse
import logging
import time

from threadpoolctl import threadpool_limits

from vct.data import SyntheticConfig, generate_synthetic
from vct.model import ModelConfig
from vct.train import TrainConfig, evaluate, train_loop


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--train", type=int, default=200)
    ap.add_argument("--test", type=int, default=50)
    ap.add_argument("--epochs", type=int, default=30)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--brightness-jitter", type=float, default=0.1)
    ap.add_argument("--noise-std", type=float, default=0.02)
    ap.add_argument("--dtype", default="float32")
    ap.add_argument("--out", default=None)
    args = ap.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")

    scfg = SyntheticConfig(seed=args.seed, brightness_jitter=args.brightness_jitter, noise_std=args.noise_std)
    train = generate_synthetic(scfg, args.train)
    test = generate_synthetic(scfg, args.test, start=args.train)
    t0 = time.perf_counter()
    with threadpool_limits(limits=1):
        res = train_loop(ModelConfig(dtype=args.dtype), train, None, TrainConfig(epochs=args.epochs, seed=args.seed),
                         out_dir=args.out)
        _, tr = evaluate(res.model, train)
        _, te = evaluate(res.model, test)
    print(f"seconds={time.perf_counter() - t0:.1f}")
    print(f"train_f1={tr.f1:.4f} test_f1={te.f1:.4f}")
    print(te.to_text("synthetic test"))


if __name__ == "__main__":
    main()
