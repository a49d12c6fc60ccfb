"""Command-line entry points: gen-data, train, synth, eval, ablate.

Flags mirror config keys and take precedence over the config file. The
CAST_LOG_LEVEL environment variable (error, info, debug) controls verbosity.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from . import data as D
from .backbone import BlockConfig
from .checkpoint import CheckpointMeta, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig, load_config
from .evals import (
    AblationVariant,
    ablation_table_pretty,
    ablation_table_tsv,
    build_eval_suite,
    evaluate_speech,
    evaluate_text,
    run_ablation,
)
from .flow import GuidanceScale
from .inference import SpeechPrompt, SynthesisRequest, load_mel, save_mel, synthesize
from .model import TtsModel
from .timbre import ATTRIBUTE_NAMES, Caption
from .trainer import run_pipeline, write_metrics_log

log = logging.getLogger("casttts")

_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

RATE_NAMES = {"slow": 0, "normal": 1, "fast": 2}
EXPR_NAMES = {"flat": 0, "normal": 1, "expressive": 2}


def _setup_logging():
    level = os.environ.get("CAST_LOG_LEVEL", "info").lower()
    if level not in _LEVELS:
        raise ValueError(f"CAST_LOG_LEVEL must be one of {sorted(_LEVELS)}, got {level!r}")
    logging.basicConfig(level=_LEVELS[level], format="%(levelname)s %(message)s")


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "scale_factor", None) is not None:
        cfg.scale_factor = args.scale_factor
    cfg.train = dataclasses.replace(cfg.train, scale_factor=cfg.scale_factor)
    cfg.validate()
    return cfg


def parse_caption(text: str) -> Caption:
    """Parse "gender=1,pitch=2,rate=fast,expressiveness=flat" style captions;
    levels may be integers or the rate/expressiveness level names."""
    values = {}
    for part in text.split(","):
        if "=" not in part:
            raise ValueError(f"caption field {part!r} must look like name=level")
        key, val = part.split("=", 1)
        key, val = key.strip(), val.strip()
        if key not in ATTRIBUTE_NAMES:
            raise ValueError(f"unknown caption attribute {key!r}")
        if val.isdigit() or (val.startswith("-") and val[1:].isdigit()):
            values[key] = int(val)
        elif key == "rate" and val in RATE_NAMES:
            values[key] = RATE_NAMES[val]
        elif key == "expressiveness" and val in EXPR_NAMES:
            values[key] = EXPR_NAMES[val]
        else:
            raise ValueError(f"cannot parse level {val!r} for {key}")
    missing = [n for n in ATTRIBUTE_NAMES if n not in values]
    if missing:
        raise ValueError(f"caption missing attributes: {missing}")
    return Caption(**values)


def cmd_gen_data(args) -> int:
    cfg = _load_run_config(args)
    out = Path(args.out or cfg.corpus_path)
    corpus = D.build_corpus(cfg.data.n_speakers, cfg.data.n_texts, seed=cfg.seed)
    D.save_corpus(out, corpus)
    log.info(
        "wrote %s: %d speech pairs, %d text pairs",
        out, len(corpus.speech_pairs), len(corpus.text_pairs),
    )
    print(out)
    return 0


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    corpus_path = Path(args.corpus or cfg.corpus_path)
    if not corpus_path.exists():
        raise FileNotFoundError(f"corpus {corpus_path} not found; run gen-data first")
    corpus = D.load_corpus(corpus_path)
    out_dir = Path(args.out or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    start_ckpt = getattr(args, "checkpoint", None)
    if start_ckpt:
        model, meta = load_checkpoint(start_ckpt)
        provenance = meta.stage_provenance
    else:
        if args.stage in ("2", "3"):
            raise ValueError(f"stage {args.stage} requires --checkpoint from the previous stage")
        model = TtsModel(cfg.model, seed=cfg.seed)
        provenance = "init"

    mode = {"1": "stage1", "2": "stage2", "3": "stage3", "base": "base", "all": "all"}[args.stage]
    log_path = out_dir / "metrics.jsonl"

    def on_stage_done(stage, m, records):
        nonlocal provenance
        provenance = provenance + ">" + stage.stage_id
        ckpt = out_dir / f"ckpt_{stage.stage_id}.bin"
        save_checkpoint(ckpt, m, CheckpointMeta(seed=cfg.seed, stage_provenance=provenance))
        write_metrics_log(log_path, records)
        log.info("stage %s done, checkpoint %s", stage.stage_id, ckpt)

    run_pipeline(model, corpus, cfg.train, cfg.seed, mode=mode, on_stage_done=on_stage_done)
    final = out_dir / "ckpt_final.bin"
    save_checkpoint(final, model, CheckpointMeta(seed=cfg.seed, stage_provenance=provenance))
    print(final)
    return 0


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    if bool(args.prompt_mel) == bool(args.caption):
        raise ValueError("provide exactly one of --prompt-mel/--ref-text or --caption")
    if args.prompt_mel:
        if not args.ref_text:
            raise ValueError("--prompt-mel requires --ref-text")
        prompt = SpeechPrompt(mel=load_mel(args.prompt_mel), ref_text=args.ref_text)
        req = SynthesisRequest(
            target_text=args.text, speech=prompt,
            guidance=GuidanceScale(args.cfg_scale), num_steps=args.steps, seed=cfg.seed,
        )
    else:
        req = SynthesisRequest(
            target_text=args.text, caption=parse_caption(args.caption),
            guidance=GuidanceScale(args.cfg_scale), num_steps=args.steps, seed=cfg.seed,
        )
    mel = synthesize(model, req)
    out = Path(args.out or "synth.mel")
    save_mel(out, mel, seed=cfg.seed, cfg_scale=args.cfg_scale, num_steps=args.steps)
    log.info("wrote %s (%d frames x %d bins)", out, mel.shape[0], mel.shape[1])
    print(out)
    return 0


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    model, _ = load_checkpoint(args.checkpoint)
    corpus_path = Path(args.corpus or cfg.corpus_path)
    if not corpus_path.exists():
        raise FileNotFoundError(f"corpus {corpus_path} not found")
    corpus = D.load_corpus(corpus_path)
    suite = build_eval_suite(cfg.evaluation.n_requests, seed=cfg.seed)
    rs = evaluate_speech(model, suite, corpus.speech_pairs,
                         cfg.sampling.num_steps, args.cfg_scale, seed=cfg.seed)
    rt = evaluate_text(model, suite, corpus.text_pairs,
                       cfg.sampling.num_steps, args.cfg_scale, seed=cfg.seed)
    report = {
        "speech": dataclasses.asdict(rs),
        "text": dataclasses.asdict(rt),
        "seed": cfg.seed,
        "n_requests": cfg.evaluation.n_requests,
    }
    out = Path(args.out or "eval_report.json")
    with open(out, "w") as f:
        json.dump(report, f, indent=2, sort_keys=True)
        f.write("\n")
    print(json.dumps(report, indent=2, sort_keys=True))
    return 0


def default_ablation_variants(model_cfg: BlockConfig):
    mk = lambda fusion: dataclasses.replace(model_cfg, fusion=fusion)
    return [
        AblationVariant("SA-base", mk("SA"), "base"),
        AblationVariant("SACA-base", mk("SACA"), "base"),
        AblationVariant("CA-base", mk("CA"), "base"),
        AblationVariant("CA_TV-base", mk("CA_TV"), "base"),
        AblationVariant("CA-multistage", mk("CA"), "multistage"),
    ]


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    corpus_path = Path(args.corpus or cfg.corpus_path)
    if not corpus_path.exists():
        raise FileNotFoundError(f"corpus {corpus_path} not found")
    corpus = D.load_corpus(corpus_path)
    train_cfg = dataclasses.replace(
        cfg.train, scale_factor=cfg.scale_factor * cfg.evaluation.ablation_scale
    )
    rows = run_ablation(
        default_ablation_variants(cfg.model), corpus, train_cfg, seed=cfg.seed,
        n_requests=cfg.evaluation.ablation_requests,
        num_steps=cfg.sampling.num_steps, cfg_scale=args.cfg_scale,
    )
    out = Path(args.out or "ablation.tsv")
    with open(out, "w") as f:
        f.write(ablation_table_tsv(rows))
    pretty = ablation_table_pretty(rows)
    with open(str(out) + ".txt", "w") as f:
        f.write(pretty)
    print(pretty, end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="casttts",
        description="Toy flow-matching TTS with unified speech/text timbre prompts",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="overrides config seed")
        p.add_argument("--scale-factor", type=float, dest="scale_factor",
                       help="scales stage step counts")
        p.add_argument("--out", help="output path")

    p = sub.add_parser("gen-data", help="generate and serialize the toy corpus")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="run the training pipeline")
    common(p)
    p.add_argument("--corpus", help="corpus file from gen-data")
    p.add_argument("--stage", choices=["1", "2", "3", "base", "all"], default="all")
    p.add_argument("--checkpoint", help="resume from this checkpoint (stages 2/3)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("synth", help="synthesize a mel grid from a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--text", required=True, help="target transcription")
    p.add_argument("--prompt-mel", dest="prompt_mel", help="speech prompt mel file")
    p.add_argument("--ref-text", dest="ref_text", help="transcription of the speech prompt")
    p.add_argument("--caption", help="gender=..,pitch=..,rate=..,expressiveness=..")
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=3.0)
    p.add_argument("--steps", type=int, default=32, help="ODE steps")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--corpus", help="held-out corpus for reconstruction error")
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=3.0)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and compare fusion/strategy variants")
    common(p)
    p.add_argument("--corpus", help="corpus file from gen-data")
    p.add_argument("--cfg-scale", dest="cfg_scale", type=float, default=3.0)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # one diagnostic line, nonzero exit
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
