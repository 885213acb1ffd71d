"""
Command-line entry point: gen, train, eval, gradcheck, split, prompts, ingest, attn.

Exit codes: 0 success, 1 verification failure, 2 usage or input error.
"""

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path
from typing import List, Optional

import torch

from lmr.checkpoint import load_checkpoint, restore_model
from lmr.config import RunConfig, canonical_json, load_run_config, thread_count, write_effective_config
from lmr.context_pipeline import InstructionList, emit_prompt_batch, ingest_descriptions
from lmr.errors import GradCheckFailure, LMRError, ValidationError
from lmr.evaluator import (
    CQvalThresholds,
    build_cqval_split,
    cqval_sweep,
    dump_predictions,
    evaluate,
    export_attention,
    forward_with_attention,
    predict,
    truncate_query,
    report_frame,
    write_report,
)
from lmr.feature_io import load_descriptions, load_manifest, write_manifest
from lmr.log import setup_logger
from lmr.model import ModelConfig, build_model
from lmr.synthetic_world import HELDOUT_MANIFEST, TRAIN_MANIFEST, read_dataset, write_world
from lmr.trainer import grad_check, train

logger = logging.getLogger(__name__)

TINY_MODEL = ModelConfig(
    hidden_dim=8,
    heads=2,
    k_moment_queries=2,
    visual_dim=8,
    text_dim=8,
    dropout=0.0,
)


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="JSON config file with sections world, model, loss, train, eval")
    parser.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE", help="config override"
    )


def _run_config(args) -> RunConfig:
    cfg = load_run_config(args.config, args.overrides)
    print(canonical_json(cfg))
    return cfg


def _echo_arguments(args, **resolved) -> None:
    """Print the effective settings of a command that runs without a config file."""
    settings = {k: v for k, v in vars(args).items() if k not in ("func", "overrides")}
    settings.update(resolved)
    print(json.dumps(settings, sort_keys=True, indent=2, default=str))


def _start(out_dir: Path) -> None:
    setup_logger("lmr", stream=True, log_dir=str(out_dir / "logs"))
    torch.set_num_threads(thread_count())


def cmd_gen(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        if not args.force:
            print(f"error: {out} is not empty; pass --force to overwrite", file=sys.stderr)
            return 2
        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)
    _start(out)
    summary = write_world(cfg.world, out, n_jobs=thread_count())
    write_effective_config(cfg, out)
    print(
        f"episodes={summary['episodes']} heldout={summary['heldout_episodes']} "
        f"clips={summary['clips']} windows={summary['windows']}"
    )
    return 0


def _require(path: Path, what: str) -> Path:
    if not path.exists():
        raise FileNotFoundError(f"missing {what}: {path}")
    return path


def cmd_train(args) -> int:
    cfg = _run_config(args)
    data = Path(args.data)
    _require(data / TRAIN_MANIFEST, "training manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _start(out)
    write_effective_config(cfg, out)

    dataset = read_dataset(data, TRAIN_MANIFEST)
    heldout = read_dataset(data, HELDOUT_MANIFEST) if (data / HELDOUT_MANIFEST).exists() else None
    state = train(cfg.train, cfg.model, cfg.loss, dataset, out, heldout=heldout, resume_from=args.from_checkpoint)
    last = state.loss_history[-1] if state.loss_history else None
    print(f"trained to epoch {state.epoch}" + (f", final total loss {last['total']:.4f}" if last else ""))
    return 0


def _load_model(args, cfg: Optional[RunConfig]):
    """Model from the checkpoint; its architecture comes from --config when given."""
    ckpt = load_checkpoint(_require(Path(args.checkpoint), "checkpoint"))
    model_cfg = cfg.model if args.config or args.overrides else ckpt.model_cfg
    model = build_model(model_cfg)
    restore_model(ckpt, model)
    return model


def _eval_manifest(args, data: Path) -> str:
    if args.manifest:
        return args.manifest
    return HELDOUT_MANIFEST if (data / HELDOUT_MANIFEST).exists() else TRAIN_MANIFEST


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    data = Path(args.data)
    manifest = _eval_manifest(args, data)
    _require(data / manifest, "evaluation manifest")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _start(out)
    write_effective_config(cfg, out)

    model = _load_model(args, cfg)
    bundles = read_dataset(data, manifest)
    thresholds = CQvalThresholds.parse(args.cqval) if args.cqval else cfg.eval.cqval
    if thresholds is not None:
        episodes = build_cqval_split([b.record for b in bundles], thresholds)
        keep = {e.qid for e in episodes}
        bundles = [b for b in bundles if b.record.qid in keep]
        logger.info(f"C-QVal split {thresholds.least_clause_count},{thresholds.least_word_count}: {len(bundles)} queries")

    predictions = predict(
        model,
        bundles,
        batch_size=cfg.eval.batch_size,
        ablate_context=args.ablate_context,
        ablate_visual=args.ablate_visual,
    )
    episodes = [b.record for b in bundles]
    row = evaluate(predictions, episodes, cfg.eval.thresholds)
    report = report_frame(row)
    csv_path, _ = write_report(report, out, args.stem)
    print(report.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    logger.info(f"Evaluated {len(episodes)} queries from {manifest}; report at {csv_path}")

    if args.cqval_sweep:
        sweep = cqval_sweep(predictions, episodes, cfg.eval.cqval_grid)
        write_report(sweep, out, f"{args.stem}_cqval")
        print(sweep.to_string(index=False, float_format=lambda v: f"{v:.2f}"))
    if args.dump_predictions:
        dump_predictions(predictions, out / f"{args.stem}_predictions.jsonl")
    return 0


def cmd_gradcheck(args) -> int:
    setup_logger("lmr", stream=True)
    torch.set_num_threads(thread_count())
    if args.config or args.overrides:
        cfg = _run_config(args)
        model_cfg, weights = cfg.model, cfg.loss
    else:
        model_cfg, weights = TINY_MODEL, RunConfig().loss
        _echo_arguments(args, model=model_cfg.model_dump(mode="json"), loss=weights.model_dump(mode="json"))
    try:
        report = grad_check(
            model_cfg, probes=args.probes, tolerance=args.tolerance, weights=weights, prefix=args.prefix, seed=args.seed
        )
    except GradCheckFailure as e:
        print(f"gradient check FAILED: {e}")
        for probe in e.failures[:10]:
            print(f"  {probe.name}[{probe.index}] analytic={probe.analytic:.6e} numeric={probe.numeric:.6e} "
                  f"rel_error={probe.rel_error:.3e}")
        return 1
    print(
        f"gradient check passed: {len(report.checked)} probes, {len(report.skipped)} skipped, "
        f"max relative error {report.max_rel_error:.3e}"
    )
    return 0


def cmd_split(args) -> int:
    _echo_arguments(args)
    episodes = load_manifest(_require(Path(args.manifest), "manifest"), clip_seconds=args.clip_seconds)
    split = build_cqval_split(episodes, CQvalThresholds.parse(args.cqval))
    write_manifest(split, args.out)
    print(f"{len(split)} of {len(episodes)} queries kept")
    return 0


def cmd_prompts(args) -> int:
    _echo_arguments(args)
    episodes = load_manifest(_require(Path(args.manifest), "manifest"), clip_seconds=args.clip_seconds)
    lines = emit_prompt_batch(episodes, args.out, InstructionList(), seed=args.seed)
    print(f"{lines} prompts written to {args.out}")
    return 0


def cmd_ingest(args) -> int:
    cfg = _run_config(args)
    episodes = load_manifest(_require(Path(args.manifest), "manifest"), clip_seconds=cfg.world.clip_seconds)
    descriptions = load_descriptions(_require(Path(args.descriptions), "description file"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = ingest_descriptions(descriptions, episodes, cfg.world.text_embedder, out)
    print(f"{len(written)} context feature files written to {out}")
    return 0


def cmd_attn(args) -> int:
    cfg = _run_config(args) if args.config or args.overrides else None
    data = Path(args.data)
    manifest = _eval_manifest(args, data)
    _require(data / manifest, "manifest")
    model = _load_model(args, cfg)
    if cfg is None:
        _echo_arguments(args, manifest=manifest, model=model.cfg.model_dump(mode="json"))
    bundles = read_dataset(data, manifest)
    if args.qid:
        matching = [b for b in bundles if b.record.qid == args.qid]
        if not matching:
            raise ValidationError(f"qid {args.qid} not in {manifest}")
        bundle = matching[0]
    else:
        bundle = bundles[0]

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    full = export_attention(forward_with_attention(model, bundle), out)
    print(f"attention profile of {bundle.record.qid} written to {out}")
    if args.truncate:
        short = truncate_query(bundle, args.truncate)
        path = out.with_name(f"{out.stem}_truncated{out.suffix}")
        partial = export_attention(forward_with_attention(model, short), path)
        delta = (full[["context", "visual"]] - partial[["context", "visual"]]).abs().to_numpy().sum()
        print(f"truncated query {short.query_text!r}: profile written to {path}, total |difference| {delta:.6f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lmr", description="Video moment retrieval with LLM-derived context")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate the synthetic world")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true", help="overwrite a non-empty output directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train a model")
    _add_config_args(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--from-checkpoint", dest="from_checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest", help="manifest file name inside --data (default heldout.jsonl when present)")
    p.add_argument("--out", required=True)
    p.add_argument("--stem", default="report")
    p.add_argument("--cqval", metavar="C,W", help="evaluate only queries with >= C clauses and >= W words")
    p.add_argument("--cqval-sweep", dest="cqval_sweep", action="store_true")
    p.add_argument("--ablate-context", dest="ablate_context", action="store_true")
    p.add_argument("--ablate-visual", dest="ablate_visual", action="store_true")
    p.add_argument("--dump-predictions", dest="dump_predictions", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check")
    _add_config_args(p)
    p.add_argument("--probes", type=int, default=200)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--prefix", help="only probe parameters whose name starts with this")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("split", help="write a C-QVal sub-manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--cqval", metavar="C,W", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--clip-seconds", dest="clip_seconds", type=float, default=2.0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("prompts", help="emit description prompts for an external generator")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--clip-seconds", dest="clip_seconds", type=float, default=2.0)
    p.set_defaults(func=cmd_prompts)

    p = sub.add_parser("ingest", help="embed generated descriptions into context features")
    _add_config_args(p)
    p.add_argument("--descriptions", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ingest)

    p = sub.add_parser("attn", help="export decoder attention onto clips")
    _add_config_args(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--manifest")
    p.add_argument("--qid")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--truncate", type=int, help="also export for the query cut to its first N tokens")
    p.set_defaults(func=cmd_attn)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except GradCheckFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (LMRError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
