import argparse
import dataclasses
import logging
import platform
import sys
from pathlib import Path

from . import bench, display, lossless
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import RunConfig, load_config, parse_config, with_overrides
from .corpus import build_corpus, extract_prompts, prompts_hash
from .errors import CheckpointError, ConfigError, MissingArtifactError, SteerDecError
from .models import DecodeMode, OffsetMode, Role, SteeringVariant, to_dict
from .steering import SteeringState
from .training import Validator, generate_synthetic, next_token_loss, pretrain, train
from .transformer import TransformerModel

logger = logging.getLogger("steerdec")

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_MISSING = 3

_ALIGN_MODES = {"distill": DecodeMode.DISTILLED, "sd2": DecodeMode.SD2}


def _setup_logging(verbose: bool, quiet: bool) -> None:
    level = logging.DEBUG if verbose else logging.WARNING if quiet else logging.INFO
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def _load_run_config(args: argparse.Namespace) -> RunConfig:
    config = load_config(args.config) if args.config else parse_config({})
    return with_overrides(config, args.seed, args.out)


def _hardware_tag(config: RunConfig) -> str:
    return config.hardware_tag or f"{platform.system()}-{platform.machine()}"


def _prompts(config: RunConfig, corpus: str, n: int, length: int) -> list[list[int]]:
    if corpus not in config.corpora:
        raise ConfigError(f"unknown corpus {corpus!r}; configured: {', '.join(config.corpora)}")
    return extract_prompts(build_corpus(config.corpora[corpus]), n, length, config.seed)


def _drafter_name(tag: str) -> str:
    return f"drafter_{tag}"


def _require(paths: list[Path]) -> None:
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise MissingArtifactError(missing)


def _validation_loss(model: TransformerModel, sequences: list[list[int]]) -> float:
    return next_token_loss(model, sequences).item()


def cmd_pretrain(config: RunConfig, args: argparse.Namespace) -> int:
    train_seqs = build_corpus(config.corpora["train"])
    held_out = build_corpus(config.corpora["held_out"])
    section = config.training(config.pretrain)
    for offset, (name, role, model_cfg) in enumerate(
        (
            ("verifier", Role.VERIFIER, config.verifier),
            (_drafter_name("pretrained"), Role.DRAFTER, config.drafter),
        )
    ):
        model = TransformerModel.init(model_cfg, role, config.seed + offset)
        before = _validation_loss(model, held_out)
        result = pretrain(
            model,
            train_seqs,
            dataclasses.replace(section, seed=section.seed + offset),
            curve_path=config.report_dir / f"curve_{name}.jsonl",
            progress=not args.quiet,
        )
        after = _validation_loss(result.model, held_out)
        logger.info("%s held-out loss %.4f -> %.4f", name, before, after)
        display.print_training(f"Pretrain {name} (held-out loss {before:.4f} -> {after:.4f})", result.curve)
        meta = {"mode": str(DecodeMode.PRETRAINED), "config_hash": config.config_hash(), "held_out_loss": after}
        save_checkpoint(config.checkpoint_path(name), result.model, meta=meta)
    return EXIT_OK


def cmd_align(config: RunConfig, args: argparse.Namespace) -> int:
    mode = _ALIGN_MODES[args.mode]
    tag = args.tag or (str(mode) if not args.freeze_drafter else f"{mode}_frozen")
    verifier_path = config.checkpoint_path("verifier")
    drafter_path = config.checkpoint_path(_drafter_name("pretrained"))
    _require([verifier_path, drafter_path])
    verifier = load_checkpoint(verifier_path).model
    drafter = load_checkpoint(drafter_path).model

    section = config.training(config.align)
    overrides = {
        "variant": SteeringVariant(args.variant) if args.variant else section.variant,
        "offset_mode": OffsetMode(args.offset_mode) if args.offset_mode else section.offset_mode,
        "freeze_drafter": args.freeze_drafter or section.freeze_drafter,
    }
    section = dataclasses.replace(section, **overrides)

    syn = config.synthetic
    prompts = _prompts(config, "train", min(syn.n_sequences, config.corpora["train"].n_sequences), syn.prompt_len)
    corpus = generate_synthetic(
        verifier, prompts, syn.temperature, syn.max_len, syn.n_sequences, section.seed, bench.worker_count()
    )

    validate: Validator | None = None
    if section.eval_every:
        eval_prompts = _prompts(config, "held_out", section.eval_prompts, config.experiment.prompt_len)
        eval_engine = dataclasses.replace(config.engine, max_new_tokens=section.eval_max_new_tokens, temperature=1.0)

        def validate_tau(d: TransformerModel, s: SteeringState | None) -> float:
            return bench.evaluate_tau(verifier, d, s, eval_prompts, eval_engine)

        validate = validate_tau

    meta = {
        "mode": str(mode),
        "tag": tag,
        "config_hash": config.config_hash(),
        "training": to_dict(section),
    }
    out_path = config.checkpoint_path(_drafter_name(tag))

    def on_epoch_end(epoch: int, d: TransformerModel, s: SteeringState | None) -> None:
        save_checkpoint(out_path, d, s, {**meta, "epoch": epoch})

    result = train(
        mode,
        drafter,
        verifier,
        corpus.sequences,
        section,
        validate=validate,
        on_epoch_end=on_epoch_end,
        curve_path=config.report_dir / f"curve_{tag}.jsonl",
        progress=not args.quiet,
    )
    save_checkpoint(out_path, result.model, result.steering, {**meta, "epoch": section.epochs})
    display.print_training(f"Align {tag}", result.curve)
    return EXIT_OK


def _draft_setup(config: RunConfig, tag: str, verifier: Checkpoint) -> bench.DraftSetup:
    if tag == bench.SELF_MODE:
        return bench.DraftSetup(verifier.model, None, DecodeMode.PRETRAINED)
    ckpt = load_checkpoint(config.checkpoint_path(_drafter_name(tag)))
    mode = DecodeMode(ckpt.meta.get("mode", DecodeMode.SD2 if ckpt.steering is not None else DecodeMode.PRETRAINED))
    return bench.DraftSetup(ckpt.model, ckpt.steering, mode)


def cmd_eval(config: RunConfig, args: argparse.Namespace) -> int:
    spec = config.experiment
    changes = {}
    if args.modes:
        changes["modes"] = tuple(args.modes)
    if args.temperatures:
        changes["temperatures"] = tuple(args.temperatures)
    if args.seeds:
        changes["seeds"] = tuple(args.seeds)
    if args.no_throughput:
        changes["throughput"] = False
    spec = dataclasses.replace(spec, **changes)

    paths = [config.checkpoint_path("verifier")] + [
        config.checkpoint_path(_drafter_name(m)) for m in spec.modes if m != bench.SELF_MODE
    ]
    _require(paths)
    verifier = load_checkpoint(paths[0])
    drafters = {m: _draft_setup(config, m, verifier) for m in spec.modes}
    prompts = {c: _prompts(config, c, spec.n_prompts, spec.prompt_len) for c in spec.corpora}

    result = bench.run_experiment(
        spec, config.engine, verifier.model, drafters, prompts, _hardware_tag(config), config.config_hash()
    )
    bench.write_traces(result.traces, config.trace_dir)
    digest = bench.write_reports(result.reports, result.significance, config.report_dir)
    display.print_comparison(result.reports, result.significance, "Block efficiency")
    display.print_significance(result.significance)
    if args.profile:
        for r in result.reports:
            display.print_profile(r)
    print(f"\nreports written to {config.report_dir} (digest {digest[:16]})")
    return EXIT_OK


def cmd_verify_lossless(config: RunConfig, args: argparse.Namespace) -> int:
    verifier_path = config.checkpoint_path("verifier")
    drafter_path = config.checkpoint_path(_drafter_name(args.tag))
    _require([verifier_path] if args.tag == bench.SELF_MODE else [verifier_path, drafter_path])
    verifier = load_checkpoint(verifier_path)
    drafter = verifier if args.tag == bench.SELF_MODE else load_checkpoint(drafter_path)
    prompts = _prompts(config, args.corpus, args.prompts, config.experiment.prompt_len)
    results = lossless.run_suite(
        verifier.model, drafter.model, drafter.steering, prompts, config.engine, args.rounds, args.threshold
    )
    display.print_checks(results)
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def cmd_report(config: RunConfig, args: argparse.Namespace) -> int:
    trace_dir = Path(args.traces) if args.traces else config.trace_dir
    records = bench.load_traces(trace_dir)
    throughput = bench.load_throughput(config.report_dir) or None
    spec = config.experiment
    baseline = spec.baseline if any(r["mode"] == spec.baseline for r in records) else None
    corpora = {r["corpus"] for r in records if r["corpus"] in config.corpora}
    hashes = {c: prompts_hash(_prompts(config, c, spec.n_prompts, spec.prompt_len)) for c in sorted(corpora)}
    reports = bench.build_reports(
        records,
        config.engine.k,
        config.engine.max_new_tokens,
        _hardware_tag(config),
        hashes,
        config.config_hash(),
        throughput,
        baseline,
    )
    rows = bench.significance(reports, baseline, spec.significance_unit) if baseline else []
    digest = bench.write_reports(reports, rows, config.report_dir)
    display.print_comparison(reports, rows, "Block efficiency")
    display.print_significance(rows)
    print(f"\nreports written to {config.report_dir} (digest {digest[:16]})")
    return EXIT_OK


_COMMANDS = {
    "pretrain": cmd_pretrain,
    "align": cmd_align,
    "eval": cmd_eval,
    "verify-lossless": cmd_verify_lossless,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="steerdec", description="Speculative decoding with steered drafters")
    parser.add_argument("--config", help="Run configuration (.json)")
    parser.add_argument("--seed", type=int, help="Override the run seed")
    parser.add_argument("--out", help="Override the output directory")
    parser.add_argument("--verbose", "-v", action="store_true")
    parser.add_argument("--quiet", "-q", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("pretrain", help="Train verifier and independent drafter on the train corpus")

    align = sub.add_parser("align", help="Align the pretrained drafter to the verifier")
    align.add_argument("--mode", choices=sorted(_ALIGN_MODES), default="sd2")
    align.add_argument("--variant", choices=[v.value for v in SteeringVariant])
    align.add_argument("--offset-mode", choices=[m.value for m in OffsetMode])
    align.add_argument("--freeze-drafter", action="store_true")
    align.add_argument("--tag", help="Checkpoint tag (default: mode name)")

    ev = sub.add_parser("eval", help="Run the experiment matrix")
    ev.add_argument("--modes", nargs="+")
    ev.add_argument("--temperatures", nargs="+", type=float)
    ev.add_argument("--seeds", nargs="+", type=int)
    ev.add_argument("--no-throughput", action="store_true")
    ev.add_argument("--profile", action="store_true", help="Print positional acceptance profiles")

    vl = sub.add_parser("verify-lossless", help="Check output equivalence with verifier-only decoding")
    vl.add_argument("--tag", default="pretrained")
    vl.add_argument("--corpus", default="held_out")
    vl.add_argument("--prompts", type=int, default=4)
    vl.add_argument("--rounds", type=int, default=200_000)
    vl.add_argument("--threshold", type=float, default=0.01)

    rp = sub.add_parser("report", help="Re-aggregate traces into reports")
    rp.add_argument("--traces", help="Trace directory (default: <out>/traces)")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose, args.quiet)
    try:
        config = _load_run_config(args)
        return _COMMANDS[args.command](config, args)
    except ConfigError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_MISSING
    except (CheckpointError, OSError) as e:
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILED
    except SteerDecError as e:
        logger.debug("command failed", exc_info=True)
        print(f"Error: {e}", file=sys.stderr)
        return EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
