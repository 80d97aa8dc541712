"""Command-line entry point: ``vct {train,eval,predict,synth,inspect}``.

Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure.
Every flag can also come from ``--config FILE`` (``key=value`` lines, ``#``
comments); flags given on the command line win over the file.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import struct
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import data, metrics
from .model import Ablation, ModelConfig, VcT
from .numerics import CheckpointError, NumericError, ShapeError
from .numerics import params as ckpt
from .train import TrainConfig, evaluate, train_loop

log = logging.getLogger("vct")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3
SIDECAR_SUFFIX = ".json"

# flag dest -> ModelConfig field
MODEL_FLAGS = {
    "k": "k", "l": "l", "gnn_layers": "gnn_layers", "knn": "knn", "heads": "heads",
    "channels": "channels", "out_channels": "out_channels", "depth": "depth",
    "kmeans_iters": "kmeans_iters", "kmeans_restarts": "kmeans_restarts",
    "aux_gcn": "aux_gcn", "aux_weight": "aux_weight",
    "seed": "seed", "dtype": "dtype",
}


class UsageError(Exception):
    pass


def _int_list(text: str) -> list:
    try:
        return [int(v) for v in str(text).replace(" ", "").split(",") if v]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _bool(text) -> bool:
    if isinstance(text, bool):
        return text
    low = str(text).strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- parser construction --------------------------------------------------------


def _model_args(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--k", type=int, default=1000, help="reliable positions kept by token mining (default: %(default)s)")
    g.add_argument("--l", type=int, default=10, help="anchor tokens per branch (default: %(default)s)")
    g.add_argument("--gnn-layers", type=int, default=1, help="GCN layers (default: %(default)s)")
    g.add_argument("--knn", type=int, default=8, help="graph stencil size, one of 4, 8, 16 (default: %(default)s)")
    g.add_argument("--heads", type=int, default=8, help="attention heads (default: %(default)s)")
    g.add_argument("--channels", type=_int_list, default=[16, 32, 32],
                   help="encoder stage widths (default: 16,32,32)")
    g.add_argument("--out-channels", type=int, default=32, help="feature channels C (default: %(default)s)")
    g.add_argument("--depth", type=int, default=1, help="attention blocks per stage (default: %(default)s)")
    g.add_argument("--kmeans-iters", type=int, default=50, help="Lloyd iteration cap (default: %(default)s)")
    g.add_argument("--kmeans-restarts", type=int, default=10,
                   help="seeded k-means++ restarts, lowest SSE kept (default: %(default)s)")
    g.add_argument("--aux-gcn", type=_bool, default=False,
                   help="train the GCN with an auxiliary coarse BCE (default: %(default)s)")
    g.add_argument("--aux-weight", type=float, default=0.1, help="auxiliary loss weight (default: %(default)s)")
    g.add_argument("--dtype", choices=["float32", "float64"], default="float32",
                   help="parameter precision (default: %(default)s)")


def _data_args(p: argparse.ArgumentParser, split_default: str | None) -> None:
    g = p.add_argument_group("data")
    g.add_argument("--data", type=Path, default=None, help="dataset root with A/, B/, label/ (default: none)")
    g.add_argument("--split", default=split_default, help="split list name, reads <data>/<split>.txt (default: %(default)s)")
    g.add_argument("--patch", type=int, default=None, help="tile images into patch x patch crops (default: off)")
    g.add_argument("--synth", action="store_true", help="use the synthetic generator instead of --data")
    g.add_argument("--synth-size", type=int, default=64, help="synthetic image size (default: %(default)s)")
    g.add_argument("--synth-seed", type=int, default=7, help="synthetic generator seed (default: %(default)s)")
    g.add_argument("--synth-train", type=int, default=200, help="synthetic training pairs (default: %(default)s)")
    g.add_argument("--synth-test", type=int, default=50, help="synthetic held-out pairs (default: %(default)s)")
    g.add_argument("--brightness-jitter", type=float, default=0.1, help="synthetic brightness shift (default: %(default)s)")
    g.add_argument("--noise-std", type=float, default=0.02, help="synthetic pixel noise (default: %(default)s)")


def _common_args(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, default=None, help="key=value file; command-line flags override it")
    p.add_argument("--seed", type=int, default=0, help="seed for initialisation and shuffling (default: %(default)s)")
    p.add_argument("--threads", type=int, default=1, help="BLAS thread cap (default: %(default)s)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="vct", description="Bitemporal change detection with reliable-token transformers.")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _common_args(p)
    _model_args(p)
    _data_args(p, "train")
    g = p.add_argument_group("optimisation")
    g.add_argument("--lr", type=float, default=0.01, help="initial learning rate (default: %(default)s)")
    g.add_argument("--batch", type=int, default=8, help="batch size (default: %(default)s)")
    g.add_argument("--wd", type=float, default=0.0005, help="weight decay (default: %(default)s)")
    g.add_argument("--momentum", type=float, default=0.99, help="SGD momentum (default: %(default)s)")
    g.add_argument("--epochs", type=int, default=30, help="training epochs (default: %(default)s)")
    g.add_argument("--val-split", default="val", help="validation split list name (default: %(default)s)")
    g.add_argument("--no-rtm", action="store_true", help="replace token mining by uniform-stride tokens")
    g.add_argument("--no-te", action="store_true", help="disable self and cross attention on the tokens")
    g.add_argument("--no-td", action="store_true", help="disable anchor-primary attention")
    p.add_argument("--out", type=Path, default=Path("runs/vct"), help="output directory (default: %(default)s)")
    p.add_argument("--dump-config", action="store_true", help="print the resolved settings as key=value and exit")

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    _common_args(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint (.vct)")
    _data_args(p, "test")
    p.add_argument("--report", type=Path, default=None, help="report file (default: <checkpoint dir>/report.txt)")

    p = sub.add_parser("predict", help="predict a change mask for one image pair")
    _common_args(p)
    p.add_argument("--checkpoint", type=Path, required=True, help="model checkpoint (.vct)")
    p.add_argument("--a", type=Path, required=True, help="earlier image (PNG)")
    p.add_argument("--b", type=Path, required=True, help="later image (PNG)")
    p.add_argument("--out", type=Path, default=Path("."), help="output directory (default: %(default)s)")
    p.add_argument("--dump-coarse", action="store_true", help="also write the coarse change map P as PNG")
    p.add_argument("--dump-prob", action="store_true", help="also write raw change probabilities (.bin)")

    p = sub.add_parser("synth", help="write a synthetic dataset to disk")
    _common_args(p)
    p.add_argument("--out", type=Path, required=True, help="dataset root to create")
    p.add_argument("--size", type=int, default=64, help="image size (default: %(default)s)")
    p.add_argument("--train", type=int, default=200, help="training pairs (default: %(default)s)")
    p.add_argument("--val", type=int, default=0, help="validation pairs (default: %(default)s)")
    p.add_argument("--test", type=int, default=50, help="test pairs (default: %(default)s)")
    p.add_argument("--brightness-jitter", type=float, default=0.1, help="brightness shift (default: %(default)s)")
    p.add_argument("--noise-std", type=float, default=0.02, help="pixel noise (default: %(default)s)")

    p = sub.add_parser("inspect", help="print intermediate shapes and statistics for one pair")
    _common_args(p)
    p.add_argument("--checkpoint", type=Path, default=None, help="model checkpoint (default: random init)")
    p.add_argument("--a", type=Path, default=None, help="earlier image (default: a synthetic pair)")
    p.add_argument("--b", type=Path, default=None, help="later image")
    _model_args(p)
    return parser


# -- config files -------------------------------------------------------------


def read_config(path: Path) -> dict:
    out = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for num, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{num}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key.replace("-", "_")] = value
    return out


def _subparser(parser: argparse.ArgumentParser, command: str) -> argparse.ArgumentParser:
    for action in parser._subparsers._group_actions:
        if command in action.choices:
            return action.choices[command]
    raise UsageError(f"unknown command {command!r}")


def parse_args(argv: list[str]) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is None:
        return args
    sub = _subparser(parser, args.command)
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    values = read_config(args.config)
    explicit = {a.dest for a in sub._actions for opt in a.option_strings
                if any(tok == opt or tok.startswith(opt + "=") for tok in argv)}
    for key, raw in values.items():
        if key not in actions:
            raise UsageError(f"{args.config}: unknown key {key!r}")
        if key in explicit:
            continue
        action = actions[key]
        try:
            if isinstance(action, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
                value = _bool(raw)
            elif action.type is not None:
                value = action.type(raw)
            else:
                value = raw
        except (argparse.ArgumentTypeError, ValueError) as exc:
            raise UsageError(f"{args.config}: bad value for {key!r}: {exc}") from exc
        if action.choices is not None and value not in action.choices:
            raise UsageError(f"{args.config}: {key} must be one of {sorted(action.choices)}")
        setattr(args, key, value)
    return args


# -- helpers ---------------------------------------------------------------------


def model_config_from(args) -> ModelConfig:
    cfg = ModelConfig(**{f: getattr(args, d) for d, f in MODEL_FLAGS.items()})
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def sidecar_path(checkpoint: Path) -> Path:
    return Path(checkpoint).with_suffix(SIDECAR_SUFFIX)


def write_sidecar(checkpoint: Path, cfg: ModelConfig, ablation: Ablation) -> None:
    payload = {"model": cfg.to_dict(), "ablation": vars(ablation)}
    sidecar_path(checkpoint).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_model(checkpoint: Path) -> VcT:
    """Rebuild the model from the sidecar config and load the checkpoint strictly."""
    side = sidecar_path(checkpoint)
    if not side.exists():
        raise UsageError(f"model config {side} not found next to the checkpoint")
    try:
        payload = json.loads(side.read_text())
        names = {f.name for f in fields(ModelConfig)}
        unknown = set(payload["model"]) - names
        if unknown:
            raise UsageError(f"{side}: unknown model keys {sorted(unknown)}")
        cfg = ModelConfig(**payload["model"])
        cfg.validate()
        model = VcT(cfg, Ablation(**payload.get("ablation", {})))
    except (KeyError, TypeError, ValueError) as exc:
        raise UsageError(f"{side}: invalid model config: {exc}") from exc
    try:
        state = ckpt.load(checkpoint)
        model.params.load_state(state, strict=True)
    except (CheckpointError, OSError) as exc:
        raise UsageError(f"checkpoint {checkpoint} does not match its model config: {exc}") from exc
    return model


def _synth_config(args, size=None) -> data.SyntheticConfig:
    cfg = data.SyntheticConfig(size=size or args.synth_size, seed=args.synth_seed,
                               brightness_jitter=args.brightness_jitter, noise_std=args.noise_std)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    return cfg


def _load_split(args, split) -> list:
    try:
        return data.load_dataset(args.data, split, args.patch)
    except data.DataError as exc:
        raise UsageError(str(exc)) from exc


def _threads(n: int):
    if n < 1:
        raise UsageError("--threads must be >= 1")
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


# -- commands --------------------------------------------------------------------


def resolved_train_settings(args) -> dict:
    keys = ["k", "l", "gnn_layers", "knn", "heads", "channels", "out_channels", "depth", "kmeans_iters",
            "kmeans_restarts", "aux_gcn", "aux_weight", "dtype", "lr", "batch", "wd", "momentum", "epochs", "seed",
            "no_rtm", "no_te", "no_td"]
    return {k: getattr(args, k) for k in keys}


def cmd_train(args) -> int:
    if args.dump_config:
        for k, v in resolved_train_settings(args).items():
            print(f"{k}={','.join(map(str, v)) if isinstance(v, list) else v}")
        return EXIT_OK
    mcfg = model_config_from(args)
    ablation = Ablation(not args.no_rtm, not args.no_te, not args.no_td)
    tcfg = TrainConfig(args.lr, args.momentum, args.wd, args.batch, args.epochs, args.seed, ablation)
    try:
        tcfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    if args.synth:
        scfg = _synth_config(args)
        train_pairs = data.generate_synthetic(scfg, args.synth_train)
        val_pairs = data.generate_synthetic(scfg, args.synth_test, start=args.synth_train)
    elif args.data is not None:
        train_pairs = _load_split(args, args.split)
        val_file = args.data / f"{args.val_split}.txt"
        val_pairs = _load_split(args, args.val_split) if val_file.exists() else None
    else:
        raise UsageError("train needs --data DIR or --synth")
    f = mcfg.downsample_factor
    bad = [p.id for p in train_pairs if p.size[0] % f or p.size[1] % f]
    if bad:
        raise UsageError(f"image size of {bad[0]} is not divisible by {f}")
    result = train_loop(mcfg, train_pairs, val_pairs, tcfg, out_dir=args.out)
    write_sidecar(result.checkpoint, mcfg, ablation)
    print(f"checkpoint={result.checkpoint}")
    print(f"best_val_f1={100 * result.best_val_f1:.2f}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    if args.synth:
        scfg = _synth_config(args)
        pairs = data.generate_synthetic(scfg, args.synth_test, start=args.synth_train)
        name = "synthetic"
    elif args.data is not None:
        pairs = _load_split(args, args.split)
        name = f"{args.data.name}/{args.split}" if args.split else args.data.name
    else:
        raise UsageError("eval needs --data DIR or --synth")
    if not pairs:
        raise UsageError("no pairs to evaluate")
    f = model.downsample_factor
    for p in pairs:
        if p.label is None:
            raise UsageError(f"pair {p.id} has no label")
        if p.size[0] % f or p.size[1] % f:
            raise UsageError(f"pair {p.id} size {p.size} not divisible by {f}; use --patch")
    _, report = evaluate(model, pairs)
    print(report.to_text(name))
    print(report.to_lines(), end="")
    out = args.report or args.checkpoint.parent / "report.txt"
    out.write_text(report.to_lines())
    return EXIT_OK


def write_prob(path: Path, prob: np.ndarray) -> None:
    """Header ``H0 u32, W0 u32`` then ``H0*W0*2`` little-endian float32 values."""
    h, w, _ = prob.shape
    with open(path, "wb") as fh:
        fh.write(struct.pack("<II", h, w))
        fh.write(np.ascontiguousarray(prob, dtype="<f4").tobytes())


def read_prob(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    h, w = struct.unpack_from("<II", raw)
    return np.frombuffer(raw, dtype="<f4", offset=8).reshape(h, w, 2)


def _read_pair(args) -> data.ImagePair:
    try:
        return data.load_pair(args.a, args.b)
    except data.DataError as exc:
        raise UsageError(str(exc)) from exc


def cmd_predict(args) -> int:
    model = load_model(args.checkpoint)
    pair = _read_pair(args)
    f = model.downsample_factor
    if pair.size[0] % f or pair.size[1] % f:
        raise UsageError(f"image size {pair.size} is not divisible by the downsample factor {f}")
    fwd = model.forward(pair.a, pair.b)
    args.out.mkdir(parents=True, exist_ok=True)
    stem = pair.id
    data.save_mask(args.out / f"{stem}_mask.png", fwd.out.hard_mask())
    print(f"mask={args.out / f'{stem}_mask.png'}")
    if args.dump_coarse:
        if fwd.rtm is None:
            raise UsageError("--dump-coarse needs a model trained with token mining")
        data.save_gray(args.out / f"{stem}_coarse.png", fwd.rtm.p.as_image())
        print(f"coarse={args.out / f'{stem}_coarse.png'}")
    if args.dump_prob:
        write_prob(args.out / f"{stem}_prob.bin", fwd.out.prob.data)
        print(f"prob={args.out / f'{stem}_prob.bin'}")
    return EXIT_OK


def cmd_synth(args) -> int:
    cfg = data.SyntheticConfig(size=args.size, seed=args.seed,
                               brightness_jitter=args.brightness_jitter, noise_std=args.noise_std)
    try:
        cfg.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    splits, start = {}, 0
    for name, n in (("train", args.train), ("val", args.val), ("test", args.test)):
        pairs = data.generate_synthetic(cfg, n, start=start)
        start += n
        for p in pairs:
            data.write_pair(args.out, p)
        splits[name] = [p.id for p in pairs]
    data.write_split_lists(args.out, {k: v for k, v in splits.items() if v})
    print(f"wrote {start} pairs to {args.out}")
    return EXIT_OK


def _stats_line(name: str, arr: np.ndarray) -> str:
    shape = "x".join(str(s) for s in arr.shape)
    return f"{name:<6} {shape:<12} min={arr.min():.4f} mean={arr.mean():.4f} max={arr.max():.4f}"


def inspect_lines(model: VcT, pair: data.ImagePair) -> list[str]:
    fwd = model.forward(pair.a, pair.b)
    h, w, c = fwd.x1.shape
    stages = [("X1", fwd.x1.data.data)]
    if fwd.rtm is not None:
        stages += [
            ("Xbar", fwd.rtm.xbar.data.data.reshape(h, w, c)),
            ("P", fwd.rtm.p.as_image()),
            ("F", fwd.rtm.f1.data),
        ]
    stages.append(("T1", fwd.t1.data))
    if fwd.t1s is not None:
        stages.append(("T1*", fwd.t1s.data))
    stages += [("T1~", fwd.t1t.data), ("X1'", fwd.x1p.data), ("D", fwd.d.data), ("prob", fwd.out.prob.data)]
    lines = [f"input  {pair.size[0]}x{pair.size[1]}x3 ablation={model.ablation.label()}"]
    lines += [_stats_line(n, a) for n, a in stages]
    if fwd.rtm is not None:
        lines.append(f"selected={fwd.rtm.k} anchors={fwd.t1.shape[0]}x{fwd.t1.shape[1]}")
    bad = [n for n, a in stages if not np.all(np.isfinite(a))]
    if bad:
        raise NumericError(f"non-finite values in {', '.join(bad)}")
    return lines


def cmd_inspect(args) -> int:
    if args.checkpoint is not None:
        model = load_model(args.checkpoint)
    else:
        model = VcT(model_config_from(args))
    if (args.a is None) != (args.b is None):
        raise UsageError("inspect needs both --a and --b, or neither")
    if args.a is not None:
        pair = _read_pair(args)
    else:
        pair = data.synthetic_pair(data.SyntheticConfig(seed=args.seed), 0)[0]
    f = model.downsample_factor
    if pair.size[0] % f or pair.size[1] % f:
        raise UsageError(f"image size {pair.size} is not divisible by the downsample factor {f}")
    for line in inspect_lines(model, pair):
        print(line)
    return EXIT_OK


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "predict": cmd_predict, "synth": cmd_synth, "inspect": cmd_inspect}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _threads(args.threads) if args.threads else contextlib.nullcontext():
            return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ShapeError, data.DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
