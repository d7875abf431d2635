"""Command line entry point: ``rlbioaug {synth,train,probe,trace,compare}``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import checkpoint, data
from .autodiff import NumericError, Tensor
from .checkpoint import CheckpointError
from .data import DataFormatError, SyntheticTaskSpec, Task
from .model import EncoderConfig
from .pipeline import (ConfigError, ExperimentConfig, linear_probe, run_experiment, trace_from_csv,
                       trace_to_csv, write_run)

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("rlbioaug")


class DataError(Exception):
    pass


def encoder_config_from_checkpoint(tensors: dict, input_len: int) -> EncoderConfig:
    """Recover the architecture from parameter shapes."""
    try:
        n_blocks = len([k for k in tensors if k.startswith("block") and k.endswith(".conv1")])
        channels = tuple(int(tensors[f"block{i}.conv1"].shape[0]) for i in range(n_blocks))
        kernel = int(tensors["stem.w"].shape[2])
        emb = int(tensors["embed.w"].shape[1])
    except KeyError as exc:
        raise DataError(f"encoder checkpoint is missing tensor {exc}") from exc
    return EncoderConfig(input_len=input_len, n_blocks=n_blocks, channels=channels,
                         embedding_dim=emb, kernel_size=kernel)


def cmd_synth(args) -> int:
    spec = SyntheticTaskSpec(Task(args.task), args.n_subjects, args.epochs_per_subject, args.L, args.C,
                             args.noise_level, args.seed, args.sample_rate)
    try:
        spec.validate()
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    ds = data.synth_generate(spec)
    data.save(args.out, ds)
    print(f"wrote {len(ds)} epochs ({ds.n_classes} classes, L={ds.epoch_len}) to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = ExperimentConfig.from_json(args.config)
    result = run_experiment(cfg)
    write_run(args.out_dir, cfg, result)
    r = result.report
    print(f"{cfg.mode}: B-ACC {r.b_acc:.4f}  MF1 {r.mf1:.4f}  -> {args.out_dir}")
    return EXIT_OK


def cmd_probe(args) -> int:
    tensors = checkpoint.load(args.encoder)
    ds = data.load(args.data)
    ds = data.split(ds, args.train_frac, seed=args.seed)
    ecfg = encoder_config_from_checkpoint(tensors, ds.epoch_len)
    enc = {k: Tensor(v) for k, v in tensors.items()}
    try:
        report = linear_probe(enc, ds, ecfg, args.c, args.seed)
    except ValueError as exc:
        raise DataError(str(exc)) from exc
    text = report.to_json()
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def cmd_trace(args) -> int:
    path = Path(args.run_dir) / "trace.csv"
    try:
        rows = trace_from_csv(path.read_text())
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot read trace {path}: {exc}") from exc
    Path(args.csv).write_text(trace_to_csv(rows))
    if rows:
        last = rows[-1]
        probs = "  ".join(f"{k[2:]} {last[k]:.3f}" for k in ("p_mask", "p_perm", "p_crop", "p_flip", "p_warp"))
        print(f"{len(rows)} steps; final mean reward {last['mean_reward']:.4f}; {probs}")
    else:
        print("empty trace (no agent training in this run)")
    return EXIT_OK


def cmd_compare(args) -> int:
    cfgs = [ExperimentConfig.from_json(p) for p in args.configs]
    lines = ["| config | mode | action | reward | B-ACC | MF1 |", "|---|---|---|---|---|---|"]
    for path, cfg in zip(args.configs, cfgs):
        r = run_experiment(cfg).report
        lines.append(f"| {Path(path).name} | {cfg.mode} | {cfg.fixed_action or '-'} | {cfg.reward_mode} "
                     f"| {r.b_acc:.4f} | {r.mf1:.4f} |")
    table = "\n".join(lines) + "\n"
    Path(args.table).write_text(table)
    sys.stdout.write(table)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rlbioaug", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset file")
    s.add_argument("--task", required=True, choices=[t.value for t in Task])
    s.add_argument("--out", required=True)
    s.add_argument("--n-subjects", type=int, default=10)
    s.add_argument("--epochs-per-subject", type=int, default=60)
    s.add_argument("--L", type=int, default=128)
    s.add_argument("--C", type=int, default=4)
    s.add_argument("--noise-level", type=float, default=0.3)
    s.add_argument("--sample-rate", type=float, default=100.0)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="run one experiment from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("probe", help="linear-probe a saved encoder on a dataset file")
    pr.add_argument("--encoder", required=True)
    pr.add_argument("--data", required=True)
    pr.add_argument("--train-frac", type=float, default=0.8)
    pr.add_argument("--c", type=float, default=1.0)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--out")
    pr.set_defaults(func=cmd_probe)

    tr = sub.add_parser("trace", help="export the policy trace of a run directory")
    tr.add_argument("--run-dir", required=True)
    tr.add_argument("--csv", required=True)
    tr.set_defaults(func=cmd_trace)

    c = sub.add_parser("compare", help="run several configs and tabulate their scores")
    c.add_argument("--configs", nargs="+", required=True)
    c.add_argument("--table", required=True)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, DataFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
