"""Command-line entry point: ``vcstar {synthdata,train,convert,evaluate,ablate}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical abort.
Verbosity comes from the ``VCSTAR_LOG`` environment variable (a logging level name).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
import scipy
import torch

from . import __version__
from .features import FeatureFileError, check_code, load_features, save_features, synth_corpus
from .metrics import EvalItem, evaluate_corpus
from .pipeline import Converter, IdentityConverter, OracleConverter
from .training import (
    ABLATION_SEEDS,
    PRESETS,
    CheckpointError,
    NumericalAbort,
    TrainingConfig,
    ablation_run,
    checkpoint_load,
    checkpoint_save,
    train_loop,
    write_loss_log,
)

log = logging.getLogger("vcstar")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
CORPUS_MANIFEST = "corpus.json"


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with status 2 on bad flags; usage errors here are status 1
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# ------------------------------------------------------------- manifests


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


def versions() -> dict:
    return {
        "vcstar": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "torch": torch.__version__,
    }


def write_run_manifest(out: Path, command: str, config: dict, seed: int, outputs: list[str]) -> Path:
    """``manifest_<command>.json``: config hash, seed, library versions and produced files."""
    path = out / f"manifest_{command}.json"
    payload = {
        "command": command,
        "config": config,
        "config_hash": config_hash(config),
        "seed": seed,
        "versions": versions(),
        "outputs": sorted(outputs),
    }
    path.write_text(json.dumps(payload, indent=2, sort_keys=True))
    return path


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output directory {out}: {e}") from e
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory {out} is not writable")
    return out


def _read_config_file(args) -> dict:
    if not args.config:
        return {}
    try:
        data = json.loads(Path(args.config).read_text())
    except FileNotFoundError as e:
        raise UsageError(f"config file not found: {args.config}") from e
    except ValueError as e:
        raise UsageError(f"config file {args.config} is not valid JSON: {e}") from e
    if not isinstance(data, dict):
        raise UsageError("config file must hold a JSON object")
    return data


# ---------------------------------------------------------- corpus layout


def read_corpus_dir(root) -> tuple[dict, dict[int, list], list[EvalItem]]:
    """Load a directory written by ``synthdata``: (manifest, training corpus, eval items)."""
    root = Path(root)
    try:
        manifest = json.loads((root / CORPUS_MANIFEST).read_text())
    except FileNotFoundError as e:
        raise DataError(f"{root} has no {CORPUS_MANIFEST}; run synthdata first") from e
    except ValueError as e:
        raise DataError(f"{root / CORPUS_MANIFEST}: {e}") from e
    try:
        corpus = {int(d): [load_features(root / p) for p in files] for d, files in manifest["train"].items()}
        items = []
        for entry in manifest["eval"]:
            refs = {int(t): load_features(root / p) for t, p in entry["references"].items()}
            items.append(
                EvalItem(
                    source=entry["source"],
                    utterance=entry["utterance"],
                    features=load_features(root / entry["features"]),
                    references=refs,
                )
            )
    except (KeyError, TypeError) as e:
        raise DataError(f"{root / CORPUS_MANIFEST}: malformed corpus manifest ({e})") from e
    except FileNotFoundError as e:
        raise DataError(f"missing corpus file: {e.filename}") from e
    return manifest, corpus, items


# --------------------------------------------------------------- commands


def cmd_synthdata(args) -> int:
    out = _out_dir(args)
    n_total = args.utterances + args.eval_utterances
    try:
        syn = synth_corpus(args.domains, n_total, args.frames, args.seed, q=args.q, segment_len=args.min_frames)
    except ValueError as e:
        raise UsageError(str(e)) from e
    manifest = {
        "n_domains": args.domains,
        "q": args.q,
        "frames": args.frames,
        "seed": args.seed,
        "train": {},
        "eval": [],
    }
    outputs = []

    def write(x, rel, meta):
        p = out / rel
        p.parent.mkdir(parents=True, exist_ok=True)
        save_features(x, p, meta=meta)
        outputs.append(rel)
        return rel

    for d in range(args.domains):
        files = []
        for u in range(args.utterances):
            meta = {"speaker": d, "utterance": u, "provenance": f"synthetic seed {args.seed}"}
            files.append(write(syn.corpus[d][u], f"train/{d}/utt_{u:04d}.vcf", meta))
        manifest["train"][str(d)] = files
        for u in range(args.utterances, n_total):
            meta = {"speaker": d, "utterance": u, "provenance": f"synthetic seed {args.seed}"}
            src = write(syn.corpus[d][u], f"eval/{d}/utt_{u:04d}.vcf", meta)
            refs = {}
            for t, ref in sorted(syn.ground_truth[(d, u)].items()):
                if t == d:
                    continue
                meta = {"speaker": t, "utterance": u, "source_speaker": d, "provenance": "parallel ground truth"}
                refs[str(t)] = write(ref, f"reference/{d}/utt_{u:04d}/to_{t}.vcf", meta)
            manifest["eval"].append({"source": d, "utterance": u, "features": src, "references": refs})
    (out / CORPUS_MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True))
    outputs.append(CORPUS_MANIFEST)
    config = {k: getattr(args, k) for k in ("domains", "utterances", "eval_utterances", "frames", "q", "min_frames")}
    write_run_manifest(out, "synthdata", config, args.seed, outputs)
    print(f"wrote {args.domains} domains x {n_total} utterances to {out}")
    return EXIT_OK


def _training_config(args) -> TrainingConfig:
    """Preset, then the --config file, then explicit flags."""
    base = PRESETS[args.preset]().to_dict()
    base.update(_read_config_file(args))
    overrides = {
        "iterations": getattr(args, "iterations", None),
        "variant": getattr(args, "variant", None),
        "conditioning_mode": getattr(args, "conditioning", None),
        "checkpoint_every": getattr(args, "checkpoint_every", None),
        "seed": args.seed,
    }
    base.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainingConfig.from_dict(base)
    except (ValueError, TypeError) as e:
        raise UsageError(f"invalid training config: {e}") from e


def cmd_train(args) -> int:
    out = _out_dir(args)
    _, corpus, _ = read_corpus_dir(args.data)
    state = None
    if args.resume:
        state = _load_checkpoint(args.resume)
        config = state.config
        if args.iterations is not None:
            config = replace(config, iterations=args.iterations)
        if args.checkpoint_every is not None:
            config = replace(config, checkpoint_every=args.checkpoint_every)
        log.info("resuming from iteration %d", state.iteration)
    else:
        config = _training_config(args)
    try:
        state, rows = train_loop(corpus, config, state=state, out_dir=out, log_every=args.log_every)
    except NumericalAbort as e:
        log.error("%s; snapshot %s", e, e.snapshot)
        print(f"numerical abort: {e} (state saved to {out / 'abort.vcz'})", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        raise DataError(str(e)) from e
    ckpt = out / "checkpoint.vcz"
    checkpoint_save(state, ckpt)
    loss_log = out / "loss_log.csv"
    write_loss_log(rows, loss_log, append=bool(args.resume))
    write_run_manifest(out, "train", config.to_dict(), config.seed, ["checkpoint.vcz", "loss_log.csv"])
    print(f"iteration {state.iteration}: checkpoint {ckpt}, loss log {loss_log}")
    return EXIT_OK


def _load_checkpoint(path):
    try:
        return checkpoint_load(path)
    except FileNotFoundError as e:
        raise DataError(f"checkpoint not found: {path}") from e
    except CheckpointError as e:
        raise DataError(str(e)) from e


def cmd_convert(args) -> int:
    out = _out_dir(args)
    state = _load_checkpoint(args.model)
    conv = Converter(state.models, state.stats)
    try:
        src = check_code(args.source, conv.n_domains)
        tgt = check_code(args.target, conv.n_domains)
    except ValueError as e:
        raise UsageError(str(e)) from e
    x = load_features(args.input)
    y = conv(x, src, tgt)
    dest = Path(args.output) if args.output else out / f"{Path(args.input).stem}_{src}to{tgt}.vcf"
    dest.parent.mkdir(parents=True, exist_ok=True)
    meta = {"speaker": tgt, "source_speaker": src, "provenance": f"converted from {Path(args.input).name}"}
    save_features(y, dest, meta=meta)
    if src == tgt:
        log.info("same-domain conversion: mean |y - x| = %.4f", float(np.mean(np.abs(y.mcep - x.mcep))))
    config = {"model": str(args.model), "input": str(args.input), "source": src, "target": tgt}
    write_run_manifest(out, "convert", config, args.seed, [str(dest)])
    print(f"wrote {dest}")
    return EXIT_OK


def write_bar_data(rows: list[dict], path: Path, label_key: str) -> None:
    """Plot-ready CSV: one bar per row with mean and error columns."""
    with open(path, "w") as fh:
        fh.write("label,mcd,mcd_err,msd,msd_err\n")
        for r in rows:
            fh.write(f"{r[label_key]},{r['mcd']!r},{r.get('mcd_err', 0.0)!r},{r['msd']!r},{r.get('msd_err', 0.0)!r}\n")


def render_bars(path: Path, png: Path, title: str) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = np.genfromtxt(path, delimiter=",", names=True, dtype=None, encoding=None)
    rows = np.atleast_1d(rows)
    fig, axes = plt.subplots(1, 2, figsize=(8, 3))
    for ax, metric in zip(axes, ("mcd", "msd")):
        ax.bar([str(l) for l in rows["label"]], rows[metric], yerr=rows[f"{metric}_err"], capsize=3)
        ax.set_ylabel(f"{metric.upper()} [dB]")
        ax.tick_params(axis="x", rotation=30)
    fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(png, dpi=100)
    plt.close(fig)


def cmd_evaluate(args) -> int:
    out = _out_dir(args)
    manifest, _, items = read_corpus_dir(args.data)
    if args.baseline == "oracle":
        conv, label = OracleConverter(items), "oracle"
    elif args.baseline == "identity":
        conv, label = IdentityConverter(), "identity"
    elif args.model:
        conv, label = Converter(*_models_and_stats(args.model)), "model"
    else:
        raise UsageError("evaluate needs --model or --baseline")
    try:
        report = evaluate_corpus(conv, items, manifest["n_domains"])
    except KeyError as e:
        raise DataError(str(e)) from e
    report.write(out, stem="eval")
    bars = [{"label": f"{p['source']}->{p['target']}", "mcd": p["mcd"], "msd": p["msd"]} for p in report.pairs()]
    write_bar_data(bars, out / "eval_bars.csv", "label")
    outputs = ["eval.csv", "eval.json", "eval_bars.csv"]
    if args.plot:
        render_bars(out / "eval_bars.csv", out / "eval_bars.png", f"evaluation ({label})")
        outputs.append("eval_bars.png")
    config = {"data": str(args.data), "model": str(args.model) if args.model else None, "baseline": args.baseline}
    write_run_manifest(out, "evaluate", config, args.seed, outputs)
    overall = report.overall()
    print(f"{label}: {overall['count']} conversions, MCD {overall['mcd']:.4f} dB, MSD {overall['msd']:.4f} dB")
    return EXIT_OK


def _models_and_stats(path):
    state = _load_checkpoint(path)
    return state.models, state.stats


def cmd_ablate(args) -> int:
    out = _out_dir(args)
    _, corpus, items = read_corpus_dir(args.data)
    config = _training_config(args)
    seeds = tuple(args.seeds) if args.seeds else ABLATION_SEEDS
    try:
        report = ablation_run(corpus, items, config, args.axis, seeds)
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as e:
        raise DataError(str(e)) from e
    stem = f"ablation_{args.axis}"
    report.write(out, stem=stem)
    bars = [
        {"label": r["variant"], "mcd": r["mcd_mean"], "mcd_err": r["mcd_std"], "msd": r["msd_mean"], "msd_err": r["msd_std"]}
        for r in report.rows
    ]
    write_bar_data(bars, out / f"{stem}_bars.csv", "label")
    outputs = [f"{stem}.csv", f"{stem}.json", f"{stem}_bars.csv"]
    if args.plot:
        render_bars(out / f"{stem}_bars.csv", out / f"{stem}_bars.png", f"ablation: {args.axis}")
        outputs.append(f"{stem}_bars.png")
    write_run_manifest(out, f"ablate_{args.axis}", dict(config.to_dict(), axis=args.axis, seeds=list(seeds)), config.seed, outputs)
    for r in report.rows:
        print(f"{r['variant']:>18}  MCD {r['mcd_mean']:.3f} +- {r['mcd_std']:.3f}  MSD {r['msd_mean']:.3f} +- {r['msd_std']:.3f}")
    return EXIT_OK


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    # global flags are accepted before or after the subcommand
    common = _Parser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="JSON file with training config fields")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS)
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    p = _Parser(prog="vcstar", description="Non-parallel multi-domain feature conversion toolkit.")
    p.add_argument("--config", default=None, help="JSON file with training config fields")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=".", help="output directory")
    p.add_argument("--version", action="version", version=f"vcstar {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synthdata", parents=[common], help="write a synthetic corpus with parallel ground truth")
    s.add_argument("--domains", type=int, default=4)
    s.add_argument("--utterances", type=int, default=8, help="training utterances per domain")
    s.add_argument("--eval-utterances", type=int, default=2, help="held-out utterances per domain")
    s.add_argument("--frames", type=int, default=256)
    s.add_argument("--q", type=int, default=8, help="MCEP dimensions")
    s.add_argument("--min-frames", type=int, default=128, help="shortest allowed utterance")
    s.set_defaults(func=cmd_synthdata)

    def training_flags(s):
        s.add_argument("--data", required=True, help="corpus directory from synthdata")
        s.add_argument("--preset", choices=sorted(PRESETS), default="desk")
        s.add_argument("--iterations", type=int)
        s.add_argument("--variant", choices=["CLS_ONLY", "T_ADV", "T_ADV_PLUS_CLS", "ST_ADV"])
        s.add_argument("--conditioning", choices=["modulation_based", "channel_wise"])

    s = sub.add_parser("train", parents=[common], help="train a converter")
    training_flags(s)
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--checkpoint-every", type=int)
    s.add_argument("--log-every", type=int, default=100)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("convert", parents=[common], help="convert one feature file")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--source", type=int, required=True)
    s.add_argument("--target", type=int, required=True)
    s.add_argument("--output")
    s.set_defaults(func=cmd_convert)

    s = sub.add_parser("evaluate", parents=[common], help="MCD/MSD against parallel ground truth")
    s.add_argument("--data", required=True)
    g = s.add_mutually_exclusive_group(required=True)
    g.add_argument("--model")
    g.add_argument("--baseline", choices=["oracle", "identity"])
    s.add_argument("--plot", action="store_true", help="also render a PNG bar chart")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("ablate", parents=[common], help="objective or conditioning ablation over seeds")
    training_flags(s)
    s.add_argument("--axis", choices=["objective", "conditioning"], required=True)
    s.add_argument("--seeds", type=int, nargs="+")
    s.add_argument("--plot", action="store_true")
    s.set_defaults(func=cmd_ablate)
    return p


def _setup_logging() -> None:
    level = os.environ.get("VCSTAR_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        raise UsageError(f"VCSTAR_LOG={level!r} is not a logging level")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, FeatureFileError, CheckpointError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except FileNotFoundError as e:
        print(f"data error: no such file {e.filename}", file=sys.stderr)
        return EXIT_DATA
    except NumericalAbort as e:
        print(f"numerical abort: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
