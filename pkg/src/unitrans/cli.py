"""Command-line entry point: ``unitrans <command> ...``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from . import __version__
from .data import (AlignmentError, CorpusDataError, FormatError, ScheduleConfigError, load_bitext,
                   load_corpus, read_features, read_lines, save_corpus, synth_generate, write_lines)
from .decoding import BeamConfig, BeamConfigError, translate_cascade, translate_sources
from .losses import GLOSS2TEXT, MT, SIGN2GLOSS, SIGN2TEXT, DataError, InfeasibleAlignmentError
from .metrics import MetricError, evaluate
from .model import ModelConfig
from .tokenizer import (MergeTable, SubwordTokenizer, TokenizerError, Vocabulary, build_tokenizer,
                        learn_bpe, preprocess)
from .training import (CheckpointError, DivergenceError, TrainConfig, average_checkpoints, load_checkpoint,
                       model_from_checkpoint, read_best, save_checkpoint, set_deterministic, train)

log = logging.getLogger("unitrans")

EXIT_OK, EXIT_CONFIG, EXIT_DATA = 0, 2, 3


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    """Every tunable knob; defaults follow the final published configuration."""
    # model
    d_model: int = 256
    heads: int = 4
    d_ff: int = 4096
    enc_modality_layers: int = 1
    enc_shared_layers: int = 5
    dec_layers: int = 6
    dropout_residual: float = 0.4
    dropout_attn: float = 0.3
    dropout_ffn: float = 0.5
    ctc_alpha: float = 0.3
    label_smoothing: float = 0.1
    ctc_bias: bool = True
    tag_position: bool = True
    # tokenizer
    bpe_ops: int = 8000
    bpe_min_frequency: int = 2
    bpe_dropout: float = 0.2
    stochastic_rate: float = 0.6
    gate_mode: str = "per_epoch"
    mt_source_preprocess: str = "strip_punct"
    # optimisation
    seed: int = 1
    max_steps: int = 30000
    warmup: int = 4000
    lr_scale: float = 1.0
    beta1: float = 0.9
    beta2: float = 0.998
    adam_eps: float = 1e-9
    l2: float = 0.0
    grad_clip: float = 0.0
    xavier_gain: float = 0.5
    batch_tokens: int = 2048
    bucket_pool: int = 0
    mt_ratio: int = 3
    tasks: str = "sign2gloss,sign2text,gloss2text"
    feature_noise: float = 0.0
    eval_every: int = 500
    keep_best_k: int = 10
    log_every: int = 100
    # decoding
    beam_size: int = 8
    length_penalty: float = 1.0
    max_len_ratio: float = 1.5
    max_len_offset: int = 10

    def model_config(self, vocab_size, feature_dim, vocab=None):
        kw = {f.name: getattr(self, f.name) for f in fields(ModelConfig) if hasattr(self, f.name)}
        return ModelConfig(vocab_size=vocab_size, feature_dim=feature_dim, **kw)

    def train_config(self):
        kw = {f.name: getattr(self, f.name) for f in fields(TrainConfig)
              if hasattr(self, f.name) and f.name not in ("tasks", "dev_beam")}
        tasks = tuple(t for t in self.tasks.split(",") if t)
        return TrainConfig(tasks=tasks, dev_beam=self.beam_size, **kw)

    def beam_config(self):
        return BeamConfig(self.beam_size, self.length_penalty, self.max_len_ratio, self.max_len_offset)

    def render(self):
        return "".join(f"{k}={_fmt(v)}\n" for k, v in asdict(self).items())


PRESETS = {
    "paper": {},
    "desk": {"d_model": 64, "heads": 2, "d_ff": 256, "enc_modality_layers": 1, "enc_shared_layers": 2,
             "dec_layers": 2, "dropout_residual": 0.1, "dropout_attn": 0.1, "dropout_ffn": 0.1,
             "warmup": 800, "max_steps": 5000, "batch_tokens": 2400, "lr_scale": 1.5, "bpe_dropout": 0.0,
             "mt_ratio": 1, "eval_every": 250},
}


def _fmt(v):
    return str(v).lower() if isinstance(v, bool) else str(v)


def _parse_value(key, typ, raw):
    try:
        if typ is bool or typ == "bool":
            low = str(raw).lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if typ is int or typ == "int":
            return int(raw)
        if typ is float or typ == "float":
            return float(raw)
        return str(raw)
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {getattr(typ, '__name__', typ)}") from None


def _field_types():
    return {f.name: f.type for f in fields(RunConfig)}


def read_config_file(path):
    """Parse ``key=value`` lines (``#`` comments allowed); unknown keys are rejected."""
    types = _field_types()
    values = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in types:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        values[key] = _parse_value(key, types[key], raw)
    return values


def resolve_config(args):
    """Defaults < preset < config file < command-line flags."""
    values = {}
    preset = getattr(args, "preset", None)
    if preset:
        values.update(PRESETS[preset])
    if getattr(args, "config", None):
        values.update(read_config_file(args.config))
    types = _field_types()
    for key in types:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = _parse_value(key, types[key], v)
    if "seed" not in values and os.environ.get("UNITRANS_SEED"):
        values["seed"] = _parse_value("seed", int, os.environ["UNITRANS_SEED"])
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def _add_config_flags(parser):
    group = parser.add_argument_group("config keys (also settable as key=value lines in --config)")
    for f in fields(RunConfig):
        group.add_argument(f"--{f.name}", default=None, metavar=str(f.type).upper(),
                           help=f"default: {_fmt(f.default)}")
    parser.add_argument("--config", help="key=value config file; flags override it")
    parser.add_argument("--preset", choices=sorted(PRESETS), help="named set of overrides applied first")


# -- commands --------------------------------------------------------------------------------

def _ensure_out_dir(path, force):
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigError(f"{path} exists and is not empty (use --force)")
    path.mkdir(parents=True, exist_ok=True)
    return path


def cmd_synth_data(args):
    sizes = [int(x) for x in args.sizes.split(",")]
    if len(sizes) != 3 or min(sizes) < 0:
        raise ConfigError("--sizes takes three non-negative integers: train,dev,test")
    seed = args.seed if args.seed is not None else int(os.environ.get("UNITRANS_SEED", "1"))
    out = _ensure_out_dir(args.out_dir, args.force)
    n_mt = args.mt_size if args.mt_size is not None else 2 * sizes[0]
    train_c, dev_c, test_c, mt = synth_generate(seed, *sizes, n_mt=n_mt, gloss_vocab=args.gloss_vocab,
                                                word_vocab=args.word_vocab, feature_dim=args.feature_dim,
                                                noise=args.sigma)
    for name, corpus in (("train", train_c), ("dev", dev_c), ("test", test_c)):
        save_corpus(corpus, out / name)
    write_lines(out / "mt.src", mt.source)
    write_lines(out / "mt.tgt", mt.target)
    log.info("wrote %d/%d/%d triplets and %d MT pairs to %s", *sizes, n_mt, out)
    return EXIT_OK


def cmd_learn_bpe(args):
    lines = []
    for path in args.input:
        lines.extend(read_lines(path))
    table = learn_bpe(lines, args.ops, args.min_frequency)
    table.save(args.merges)
    Vocabulary.from_merges(table, lines).save(args.vocab)
    log.info("learned %d merges", table.num_operations)
    return EXIT_OK


def _load_tokenizer(merges, vocab):
    return SubwordTokenizer(MergeTable.load(merges), Vocabulary.load(vocab))


def cmd_train(args):
    cfg = resolve_config(args)
    tc = cfg.train_config()
    data = Path(args.data_dir)
    out = _ensure_out_dir(args.out_dir, args.force)
    train_c = load_corpus(data / "train.feat", data / "train.gloss", data / "train.text")
    dev_c = load_corpus(data / "dev.feat", data / "dev.gloss", data / "dev.text")
    mt = None
    if not args.no_mt and (data / "mt.src").exists() and tc.mt_ratio > 0:
        mt = load_bitext(data / "mt.src", data / "mt.tgt")
        mt.source = [preprocess(s, cfg.mt_source_preprocess) for s in mt.source]
    if args.merges and args.vocab:
        tok = _load_tokenizer(args.merges, args.vocab)
    else:
        lines = train_c.glosses + train_c.texts + ((mt.source + mt.target) if mt else [])
        tok = build_tokenizer(lines, cfg.bpe_ops, cfg.bpe_min_frequency)
    tok.table.save(out / "merges.bpe")
    tok.vocab.save(out / "vocab.txt")
    (out / "config.txt").write_text(cfg.render(), encoding="utf-8")
    log.info("resolved config:\n%s", cfg.render().rstrip())
    mc = cfg.model_config(len(tok.vocab), train_c.feature_dim)
    result = train(train_c, dev_c, tok, mc, tc, out, mt_corpus=mt)
    log.info("finished %d steps in %.1fs; best dev BLEU %s", result.steps, result.seconds,
             f"{result.best[0][0]:.2f}" if result.best else "n/a")
    return EXIT_OK


def _model_and_tokenizer(args):
    if args.run_dir:
        run = Path(args.run_dir)
        ckpt_path = args.checkpoint or (run / "average.sltc" if (run / "average.sltc").exists() else read_best(run, 1)[0])
        tok = _load_tokenizer(args.merges or run / "merges.bpe", args.vocab or run / "vocab.txt")
    else:
        if not (args.checkpoint and args.merges and args.vocab):
            raise ConfigError("give --run-dir, or all of --checkpoint --merges --vocab")
        ckpt_path = args.checkpoint
        tok = _load_tokenizer(args.merges, args.vocab)
    ckpt = load_checkpoint(ckpt_path)
    if not ckpt.config:
        raise ConfigError(f"{ckpt_path}: no config sidecar; cannot rebuild the model")
    return model_from_checkpoint(ckpt), tok


def cmd_translate(args):
    cfg = resolve_config(args)
    model, tok = _model_and_tokenizer(args)
    beam = cfg.beam_config()
    if args.mode in ("end2end", "cascade", "sign2gloss"):
        feats, _ = read_features(args.input)
        if args.mode == "end2end":
            lines = translate_sources(model, tok, SIGN2TEXT, feats, beam)
        elif args.mode == "sign2gloss":
            lines = translate_sources(model, tok, SIGN2GLOSS, feats, beam)
        else:
            glosses, lines = translate_cascade(model, tok, feats, beam)
            if args.gloss_out:
                write_lines(args.gloss_out, glosses)
    else:
        task = GLOSS2TEXT if args.mode == "gloss2text" else MT
        lines = translate_sources(model, tok, task, read_lines(args.input), beam)
    write_lines(args.out, lines)
    return EXIT_OK


def cmd_evaluate(args):
    hyps, refs = read_lines(args.hyp), read_lines(args.ref)
    report = evaluate(hyps, refs, "gloss" if args.mode == "gloss" else "text", args.smoothing)
    text = report.render()
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return EXIT_OK


def cmd_average_ckpt(args):
    paths = list(args.checkpoints)
    if args.run_dir:
        paths += read_best(args.run_dir, args.best)
    avg = average_checkpoints(paths)
    save_checkpoint(args.out, avg.params, avg.step, avg.config, avg.metrics)
    log.info("averaged %d checkpoints into %s", len(paths), args.out)
    return EXIT_OK


def cmd_report(args):
    from .plotting import render_run_report
    written = render_run_report(args.run_dir, args.out_dir or args.run_dir, bin_size=args.bin)
    for path in written:
        print(path)
    return EXIT_OK


def build_parser():
    p = argparse.ArgumentParser(prog="unitrans", description="Unified multi-task sign language translation")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a seeded synthetic triplet corpus and MT bitext")
    s.add_argument("--seed", type=int, default=None, help="default: $UNITRANS_SEED or 1")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--sizes", default="2000,200,200", help="train,dev,test triplet counts (default: 2000,200,200)")
    s.add_argument("--mt-size", type=int, default=None, help="MT pairs (default: 2 x train)")
    s.add_argument("--sigma", type=float, default=0.1, help="feature noise std (default: 0.1)")
    s.add_argument("--gloss-vocab", type=int, default=30)
    s.add_argument("--word-vocab", type=int, default=60)
    s.add_argument("--feature-dim", type=int, default=32)
    s.add_argument("--force", action="store_true")
    s.set_defaults(func=cmd_synth_data)

    s = sub.add_parser("learn-bpe", help="learn a joint merge table and vocabulary")
    s.add_argument("--input", nargs="+", required=True)
    s.add_argument("--ops", type=int, default=1000)
    s.add_argument("--min-frequency", type=int, default=2)
    s.add_argument("--merges", required=True)
    s.add_argument("--vocab", required=True)
    s.set_defaults(func=cmd_learn_bpe)

    s = sub.add_parser("train", help="train one multi-task model")
    s.add_argument("--data-dir", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--merges")
    s.add_argument("--vocab")
    s.add_argument("--no-mt", action="store_true", help="ignore mt.src/mt.tgt even if present")
    s.add_argument("--force", action="store_true")
    _add_config_flags(s)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("translate", help="decode with a trained checkpoint")
    s.add_argument("--mode", choices=("end2end", "cascade", "gloss2text", "sign2gloss", "mt"), required=True)
    s.add_argument("--input", required=True, help="feature file (sign modes) or text file")
    s.add_argument("--out", required=True)
    s.add_argument("--gloss-out", help="cascade mode: also write the stage-1 glosses")
    s.add_argument("--run-dir")
    s.add_argument("--checkpoint")
    s.add_argument("--merges")
    s.add_argument("--vocab")
    _add_config_flags(s)
    s.set_defaults(func=cmd_translate)

    s = sub.add_parser("evaluate", help="score hypotheses against references")
    s.add_argument("--hyp", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--mode", choices=("text", "gloss"), default="text")
    s.add_argument("--smoothing", choices=("none", "exp"), default="none")
    s.add_argument("--out")
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("average-ckpt", help="average checkpoints element-wise")
    s.add_argument("checkpoints", nargs="*")
    s.add_argument("--run-dir", help="take the best checkpoints listed in this run's best.tsv")
    s.add_argument("--best", type=int, default=10)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_average_ckpt)

    s = sub.add_parser("report", help="render loss / dev-BLEU figures and a binned TSV for a run")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--out-dir")
    s.add_argument("--bin", type=int, default=100, help="steps per averaging bin (default: 100)")
    s.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    limiter = set_deterministic()
    try:
        return args.func(args)
    except (ConfigError, BeamConfigError, ScheduleConfigError, TokenizerError) as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    except (FormatError, AlignmentError, CorpusDataError, DataError, InfeasibleAlignmentError,
            CheckpointError, MetricError, FileNotFoundError) as exc:
        log.error("data error: %s", exc)
        return EXIT_DATA
    except DivergenceError as exc:
        log.error("training diverged: %s", exc)
        return EXIT_DATA
    except ValueError as exc:
        log.error("config error: %s", exc)
        return EXIT_CONFIG
    finally:
        if limiter is not None:
            limiter.restore_original_limits()


if __name__ == "__main__":
    sys.exit(main())
