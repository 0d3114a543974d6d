"""Command-line entry point: generate | train | eval | score | explain | bench."""

import argparse
import json
import logging
import math
import sys

from . import __version__
from .config import ConfigError, load_config
from .data import DataError, EmptyDatasetError, parse_jsonl, serialize_jsonl, stratified_split
from .evaluation import bench_csv, bench_fold_vs_flat, evaluate, export_attributions, score_records
from .model import LbsfModel
from .nn.tensor import NumericError
from .synthetic import generate_synthetic
from .training import CheckpointError, load_checkpoint, save_checkpoint, train

log = logging.getLogger("lbsf")

COMMANDS = ("generate", "train", "eval", "score", "explain", "bench")


class UsageError(Exception):
    pass


def _parser():
    p = argparse.ArgumentParser(prog="lbsf", description="Payment-behavior default prediction with merchant folding.")
    p.add_argument("--version", action="version", version=f"lbsf {__version__}")
    sub = p.add_subparsers(dest="command", metavar="{" + ",".join(COMMANDS) + "}")
    sub.required = True

    def command(name, help, data=False, model=False, out=True):
        c = sub.add_parser(name, help=help)
        c.add_argument("--config", help="TOML run configuration")
        c.add_argument("--seed", type=int, help="overrides every configured seed")
        c.add_argument("--workers", type=int, default=1, help="processes for folding (1 = bitwise deterministic)")
        if data:
            c.add_argument("--data", required=True, help="input JSONL dataset")
        if model:
            c.add_argument("--model", required=True, help="checkpoint written by `lbsf train`")
        c.add_argument("--out", required=out, help="output path")
        return c

    g = command("generate", "write a synthetic JSONL dataset with planted default patterns")
    g.add_argument("--days", type=int, choices=(45, 90, 180), help="observation window in days")
    command("train", "train a model; writes the checkpoint and <out>.loss.json", data=True)
    command("eval", "AUC and recall of a checkpoint on a labelled dataset (JSON)", data=True, model=True, out=False)
    command("score", "per-user default probabilities (JSONL)", data=True, model=True)
    command("explain", "per-user merchant attention rankings (JSON)", data=True, model=True)
    command("bench", "attention cells and forward time, folded vs flat (CSV)")
    return p


def _provenance(command, cfg, model=None):
    prov = {"tool": "lbsf", "version": __version__, "command": command, "config": cfg.to_dict()}
    if model is not None:
        prov["model"] = model.cfg.to_dict()
        prov["model_training"] = getattr(model, "train_meta", None)
    return prov


def _write_json(path, obj):
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=False) + "\n"
    if path is None:
        sys.stdout.write(text)
        return
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(text)


def _meta_path(out):
    return f"{out}.meta.json"


def _load_data(path):
    ds = parse_jsonl(path)
    if len(ds) == 0:
        raise EmptyDatasetError("empty dataset")
    log.info("read %d users from %s", len(ds), path)
    return ds


def _nan_to_none(x):
    return None if x is None or (isinstance(x, float) and math.isnan(x)) else x


def cmd_generate(args, cfg):
    syn = cfg.synthesis(args.seed, args.days)
    ds = generate_synthetic(syn)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        serialize_jsonl(ds, fh)
    prov = _provenance("generate", cfg)
    prov["synthesis"] = {k: list(v) if isinstance(v, tuple) else v for k, v in vars(syn).items()}
    _write_json(_meta_path(args.out), prov)
    log.info("wrote %d users (%d positive) to %s", len(ds), int(ds.labels.sum()), args.out)


def cmd_train(args, cfg):
    ds = _load_data(args.data)
    validation = None
    if cfg.eval.validation_fraction > 0:
        ds, validation = stratified_split(ds, cfg.eval.validation_fraction, cfg.train.seed)
    model = LbsfModel(cfg.model)
    model, history = train(ds, model, cfg.train, validation, workers=cfg.workers)
    prov = _provenance("train", cfg)
    save_checkpoint(model, args.out, extra=prov)
    _write_json(
        f"{args.out}.loss.json",
        {
            "provenance": prov,
            "epochs": [
                {"epoch": h.epoch, "loss": _nan_to_none(h.loss), "val_auc": h.val_auc, "n_trained": h.n_trained}
                for h in history
            ],
        },
    )
    log.info("wrote checkpoint %s", args.out)


def cmd_eval(args, cfg):
    model = load_checkpoint(args.model)
    ds = _load_data(args.data)
    rep = evaluate(ds, model, cfg.eval.recall_fraction, cfg.eval.batch_size, cfg.workers)
    _write_json(args.out, {"provenance": _provenance("eval", cfg, model), "report": rep.to_dict()})


def cmd_score(args, cfg):
    model = load_checkpoint(args.model)
    ds = _load_data(args.data)
    probs = score_records(list(ds.records), model, cfg.eval.batch_size, cfg.workers)
    with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
        for rec, p in zip(ds.records, probs):
            scorable = not math.isnan(p)
            row = {"user_id": rec.user_id, "probability": float(p) if scorable else None, "scorable": scorable}
            fh.write(json.dumps(row, separators=(",", ":")) + "\n")
    _write_json(_meta_path(args.out), _provenance("score", cfg, model))


def cmd_explain(args, cfg):
    model = load_checkpoint(args.model)
    ds = _load_data(args.data)
    records = export_attributions(ds, model, cfg.eval.top_k_merchants, cfg.eval.batch_size)
    _write_json(args.out, {"provenance": _provenance("explain", cfg, model), "users": [r.to_dict() for r in records]})


def cmd_bench(args, cfg):
    rows = bench_fold_vs_flat(
        cfg.eval.bench_T, cfg.eval.bench_M, cfg.eval.bench_trials, cfg.model.d_model, cfg.model.n_heads, cfg.model.seed
    )
    with open(args.out, "w", encoding="utf-8", newline="") as fh:
        bench_csv(rows, fh)
    _write_json(_meta_path(args.out), _provenance("bench", cfg))
    for r in rows:
        log.info("T=%d cells folded/flat = %.4f, ms %.1f vs %.1f", r.T, r.ratio, r.folded_ms, r.flat_ms)


HANDLERS = {
    "generate": cmd_generate,
    "train": cmd_train,
    "eval": cmd_eval,
    "score": cmd_score,
    "explain": cmd_explain,
    "bench": cmd_bench,
}


def run(argv=None):
    """Run one subcommand; returns the process exit code."""
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if isinstance(exc.code, int) else 2
    if not logging.getLogger().handlers:
        logging.basicConfig(stream=sys.stderr, level=logging.INFO, format="lbsf: %(message)s")
    try:
        cfg = load_config(args.config, args.seed, args.workers)
        HANDLERS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"lbsf: config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, CheckpointError, NumericError, ValueError, OSError) as exc:
        msg = exc.strerror + f": {exc.filename}" if isinstance(exc, OSError) and exc.strerror else str(exc)
        print(f"lbsf: error: {msg}", file=sys.stderr)
        return 1
    return 0


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
