"""Command line entry point: ``selfremix <command> ...``.

Training commands read a YAML config (sections are flattened into
``TrainConfig`` fields) and apply ``--set key=value`` overrides on top.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .datagen import dataset_summary, make_dataset, read_dataset, write_dataset
from .separator import load_checkpoint
from .trainer.config import InvalidConfig, TrainConfig, config_from_dict, load_config
from .trainer.loop import METRICS_NAME, evaluate_model, run_training

log = logging.getLogger("selfremix")

REFINE_METHODS = {
    "remixit": "remixit",
    "rccl": "rccl",
    "self-remixing-pair": "self_remixing_pair",
    "self-remixing-batch": "self_remixing_batch",
    "remixit-plus-self-remixing": "remixit_plus_self_remixing",
}


def _parse_sets(items) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise InvalidConfig(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def _build_config(args, method: str, extra: dict | None = None) -> TrainConfig:
    overrides = {"method": method, "seed": args.seed, **(extra or {})}
    if args.data:
        overrides["data_dir"] = str(args.data)
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    if args.max_steps is not None:
        overrides["max_steps"] = args.max_steps
    overrides.update(_parse_sets(args.set))
    cfg = load_config(args.config, overrides) if args.config else config_from_dict({}, overrides)
    return cfg.validate()


def _train(cfg: TrainConfig, out: Path) -> int:
    report = run_training(cfg, out_dir=out)
    print(json.dumps({
        "out_dir": str(out),
        "steps": report.steps,
        "unprocessed_valid_sisdr_db": report.unprocessed_valid_sisdr_db,
        "initial_valid_sisdr_db": report.initial_valid_sisdr_db,
        "averaged_valid_sisdr_db": report.averaged_valid_sisdr_db,
        "max_collapse_metric": report.max_collapse_metric,
    }, indent=2))
    return 0


def cmd_generate_data(args) -> int:
    common = dict(base_seed=args.seed, n_speech=args.n_speech, duration_s=args.duration,
                  sample_rate_hz=args.sample_rate, snr_range_db=(args.snr_min, args.snr_max))
    for split, n in (("train", args.n_train), ("valid", args.n_valid), ("test", args.n_test)):
        if n <= 0:
            continue
        ds = make_dataset(split, n, **common)
        write_dataset(ds, Path(args.out) / split)
        log.info("%s: %s", split, dataset_summary(ds))
    return 0


def cmd_pretrain(args) -> int:
    return _train(_build_config(args, args.method), Path(args.out))


def cmd_refine(args) -> int:
    extra = {"init_checkpoint": str(args.init)} if args.init else {}
    return _train(_build_config(args, REFINE_METHODS[args.method], extra), Path(args.out))


def cmd_adapt(args) -> int:
    extra = {"semi_supervised": True}
    if args.init:
        extra["init_checkpoint"] = str(args.init)
    return _train(_build_config(args, REFINE_METHODS[args.method], extra), Path(args.out))


def cmd_evaluate(args) -> int:
    model, payload = load_checkpoint(args.checkpoint)
    if args.data:
        ds = read_dataset(args.data)
    else:
        ds = make_dataset(args.split, args.n, base_seed=args.data_seed, duration_s=args.duration)
    ev = evaluate_model(model, ds, n_refs=args.n_refs, mc=args.mc)
    ev.update(checkpoint=str(args.checkpoint), step=payload["step"], n_mixtures=len(ds), mc=args.mc)
    print(json.dumps(ev, indent=2))
    return 0


def cmd_plot(args) -> int:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax_loss, ax_sdr) = plt.subplots(1, 2, figsize=(10, 4))
    for run in args.runs:
        path = Path(run)
        path = path / METRICS_NAME if path.is_dir() else path
        recs = [json.loads(line) for line in path.read_text().splitlines() if line.strip()]
        label = path.parent.name
        trained = [r for r in recs if r["train_loss_db"] is not None]
        ax_loss.plot([r["epoch"] for r in trained], [r["train_loss_db"] for r in trained], marker="o", label=label)
        ax_sdr.plot([r["epoch"] for r in recs], [r["valid_sisdr_db"] for r in recs], marker="o", label=label)
    ax_loss.set(xlabel="epoch", ylabel="training loss (dB)", title="Training loss")
    ax_sdr.set(xlabel="epoch", ylabel="SI-SDR (dB)", title="Validation SI-SDR")
    for ax in (ax_loss, ax_sdr):
        ax.grid(alpha=0.3)
        ax.legend()
    fig.tight_layout()
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(args.out, dpi=120)
    log.info("wrote %s", args.out)
    return 0


def _training_args(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="YAML config file")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", type=Path, required=True, help="run directory")
    p.add_argument("--data", type=Path, help="dataset root with train/ and valid/ (default: generate in memory)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-steps", type=int)
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config field")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="selfremix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="write synthetic train/valid/test splits")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-train", type=int, default=500)
    p.add_argument("--n-valid", type=int, default=100)
    p.add_argument("--n-test", type=int, default=100)
    p.add_argument("--n-speech", type=int, default=2)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--sample-rate", type=int, default=8000)
    p.add_argument("--snr-min", type=float, default=10.0)
    p.add_argument("--snr-max", type=float, default=20.0)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("pretrain", help="train from scratch with PIT or MixIT")
    p.add_argument("--method", choices=("pit", "mixit"), default="mixit")
    _training_args(p)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("refine", help="unsupervised refinement of a pre-trained model")
    p.add_argument("--method", choices=tuple(REFINE_METHODS), default="self-remixing-batch")
    p.add_argument("--init", type=Path, help="pre-trained checkpoint")
    _training_args(p)
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("adapt", help="semi-supervised adaptation (labelled out-of-domain + unlabelled in-domain)")
    p.add_argument("--method", choices=tuple(REFINE_METHODS), default="self-remixing-batch")
    p.add_argument("--init", type=Path, help="pre-trained checkpoint")
    _training_args(p)
    p.set_defaults(func=cmd_adapt)

    p = sub.add_parser("evaluate", help="best-permutation SI-SDR of a checkpoint")
    p.add_argument("checkpoint", type=Path)
    p.add_argument("--data", type=Path, help="split directory or manifest (default: generate)")
    p.add_argument("--split", choices=("train", "valid", "test"), default="test")
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--duration", type=float, default=2.0)
    p.add_argument("--n-refs", type=int, help="references to score (default: all but the noise)")
    p.add_argument("--mc", action="store_true", help="apply mixture consistency at inference")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("plot", help="training curves from metrics logs")
    p.add_argument("runs", nargs="+", help="run directories or metrics.jsonl files")
    p.add_argument("--out", type=Path, default=Path("curves.png"))
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(asctime)s %(message)s")
    try:
        return args.func(args)
    except (InvalidConfig, FileNotFoundError) as err:
        log.error("%s", err)
        return 2


if __name__ == "__main__":
    sys.exit(main())
