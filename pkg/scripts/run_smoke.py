"""Two-domain smoke run: synthesize, train, convert held-out utterances, score.

    python3 scripts/run_smoke.py --iterations 2000 --out runs/smoke
"""
import argparse
import json
import logging
import time
from pathlib import Path

import numpy as np

from vcstar.features import synth_corpus
from vcstar.metrics import evaluate_corpus, items_from_synth
from vcstar.pipeline import Converter, IdentityConverter
from vcstar.training import checkpoint_save, desk_preset, train_loop, write_loss_log


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--iterations", type=int, default=2000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="runs/smoke")
    p.add_argument("--conditioning", default="modulation_based", choices=["modulation_based", "channel_wise"])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(message)s")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    syn = synth_corpus(2, 10, 256, seed=args.seed, q=8)
    train = {d: seqs[:8] for d, seqs in syn.corpus.items()}
    items = items_from_synth(syn, range(8, 10))
    cfg = desk_preset(iterations=args.iterations, seed=args.seed, conditioning_mode=args.conditioning)

    t0 = time.perf_counter()
    state, rows = train_loop(train, cfg, log_every=250)
    elapsed = time.perf_counter() - t0
    checkpoint_save(state, out / "checkpoint.vcz")
    write_loss_log(rows, out / "loss_log.csv")

    conv = Converter(state.models, state.stats)
    model = evaluate_corpus(conv, items, 2)
    ident = evaluate_corpus(IdentityConverter(), items, 2)
    model.write(out, "eval_model")
    ident.write(out, "eval_identity")

    err_in = err_out = 0.0
    for it in items:
        for t in it.references:
            if t != it.source:
                mu = state.stats[t].mcep_mean
                err_in += np.abs(it.features.mcep.mean(axis=1) - mu).mean()
                err_out += np.abs(conv(it.features, it.source, t).mcep.mean(axis=1) - mu).mean()
    summary = {
        "iterations": args.iterations,
        "seconds": elapsed,
        "mcd_model": model.overall()["mcd"],
        "mcd_identity": ident.overall()["mcd"],
        "msd_model": model.overall()["msd"],
        "msd_identity": ident.overall()["msd"],
        "mcd_improvement": 1 - model.overall()["mcd"] / ident.overall()["mcd"],
        "mean_shift_fraction": 1 - err_out / err_in,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    for k, v in summary.items():
        print(f"{k:>18}: {v:.4f}" if isinstance(v, float) else f"{k:>18}: {v}")


if __name__ == "__main__":
    main()
