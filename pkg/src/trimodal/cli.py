"""Command-line entry point: ``trimodal <command> [flags]``."""
from __future__ import annotations

import argparse
import sys
import time
from dataclasses import replace
from pathlib import Path

from . import decode as decode_mod
from . import plotting
from .corpus import PairPool, check_records, tokenize_examples, train_tokenizers
from .decode import DecodeConfig, Model, NoFinishError
from .metrics import (evaluate_direction, format_comparison, format_report, write_predictions)
from .seeding import derive_seed
from .seq2seq import LengthError, ModelConfig, init_params, load_checkpoint, save_checkpoint
from .synthworld import (SPLITS, generate_corpus, load_split, read_features, read_ppm,
                         write_features, write_ppm)
from .tokencore import (Modality, all_directions, bits_report, direction_name, group_examples,
                        parse_direction, read_token_corpus, write_token_corpus)
from .tokenizers import InsufficientDataError, SequenceTooLongError, TokenizerSet
from .trainer import (BtConfig, ConfigError, NonFiniteGradientError, TrainConfig, back_translate,
                      continue_training, parse_kv, train)


class UsageError(Exception):
    pass


def _csv_ints(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _hw(text: str) -> tuple[int, int]:
    try:
        h, w = text.lower().split("x")
        return int(h), int(w)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected HxW, got {text!r}") from None


_TYPE_NAMES = {int: "int", float: "float", str: "str", _csv_ints: "int-list", _hw: "HxW"}

COMMON = [
    ("out", str, None, "output directory"),
    ("seed", int, 0, "master seed; sub-seeds are hashed from it"),
    ("config", str, None, "key=value file supplying flag values"),
]
MODEL = [
    ("d-model", int, 64, "model width"),
    ("n-heads", int, 4, "attention heads"),
    ("ffn-dim", int, 256, "feed-forward width"),
    ("enc-layers", int, 2, "encoder layers"),
    ("dec-layers", int, 2, "decoder layers"),
    ("max-len", int, 400, "longest position the model embeds"),
]
TRAIN = [
    ("steps", int, 5000, "optimizer steps"),
    ("batch", int, 16, "examples per direction per step"),
    ("peak-lr", float, 1e-4, "peak learning rate"),
    ("warmup", int, 500, "linear warmup steps"),
    ("grad-clip", float, 1.0, "global gradient-norm clip"),
    ("log-every", int, 100, "metrics-log interval in steps"),
    ("ckpt-every", int, 0, "checkpoint interval in steps (0: final only)"),
    ("dtype", str, "float32", "training precision: float32 or float64"),
]
DECODE = [
    ("beam-width", int, 5, "beam width"),
    ("decode-mode", str, "beam", "beam or greedy"),
]
TOKENIZER = [
    ("image-vocab", int, 256, "image codebook size"),
    ("speech-vocab", int, 200, "speech codebook size"),
    ("text-vocab", int, 200, "BPE target vocabulary"),
    ("kmeans-iters", int, 25, "Lloyd iterations per codebook"),
    ("speech-cap", int, 384, "maximum speech tokens after dedup"),
]

COMMANDS = {
    "gen-corpus": ("write a synthetic tri-modal corpus", [
        ("n", int, 2000, "number of examples"),
        ("noise-sigma", float, 0.0, "speech feature noise"),
    ]),
    "train-tokenizers": ("fit image/speech codebooks and the BPE model", [
        ("corpus", str, None, "corpus directory from gen-corpus"),
    ] + TOKENIZER),
    "tokenize": ("write token corpora for every split", [
        ("corpus", str, None, "corpus directory from gen-corpus"),
        ("tokenizers", str, None, "directory from train-tokenizers"),
    ]),
    "train": ("train the shared model on all six directions", [
        ("data", str, None, "directory from tokenize"),
        ("tokenizers", str, None, "directory from train-tokenizers"),
        ("directions", str, "all", "'all', 'single' (six one-direction runs), 'both', or e.g. i2t,s2t"),
        ("resume", str, None, "checkpoint to start from"),
    ] + MODEL + TRAIN),
    "bt": ("back-translate target-only sequences and optionally continue training", [
        ("model", str, None, "intermediate checkpoint"),
        ("tokenizers", str, None, "directory from train-tokenizers"),
        ("targets", str, None, "token corpus holding target-only sequences"),
        ("target-modality", str, "t", "modality of the targets: i, s or t"),
        ("sources", str, "", "pseudo-source modalities, e.g. i,s (default: the other two)"),
        ("data", str, None, "real tokenized corpus, needed when continuing"),
        ("continue-steps", int, 0, "continuation steps after BT (0: skip)"),
        ("continue-lr", float, 5e-5, "peak learning rate for continuation"),
        ("batch", int, 16, "examples per direction per step"),
        ("warmup", int, 100, "continuation warmup steps"),
        ("dtype", str, "float32", "training precision"),
    ] + DECODE[:1] + [("decode-mode", str, "greedy", "beam or greedy")]),
    "translate": ("translate one input between modalities", [
        ("model", str, None, "checkpoint"),
        ("tokenizers", str, None, "directory from train-tokenizers"),
        ("src", str, None, "source modality: i, s or t"),
        ("tgt", str, None, "target modality: i, s or t"),
        ("input", str, "-", "PPM, TMTFEAT file, or text file ('-' reads stdin)"),
        ("output", str, "-", "output path ('-' writes text to stdout)"),
    ] + DECODE),
    "evaluate": ("score a checkpoint on a split in every direction", [
        ("model", str, None, "checkpoint"),
        ("tokenizers", str, None, "directory from train-tokenizers"),
        ("data", str, None, "directory from tokenize"),
        ("split", str, "test", "split to score"),
        ("directions", str, "all", "'all' or e.g. i2t,s2t"),
        ("limit", int, 0, "score only the first N examples (0: all)"),
        ("single-dir", str, None, "directory of single-task runs (<dir>/final.tmt) to compare against"),
    ] + DECODE),
    "sweep-speech-vocab": ("retrain and score across speech vocabulary sizes", [
        ("sizes", _csv_ints, "50,100,200", "speech vocabulary sizes"),
        ("corpus", str, None, "existing corpus directory (generated when absent)"),
        ("n", int, 2000, "corpus size when generating"),
        ("noise-sigma", float, 0.0, "speech feature noise when generating"),
        ("limit", int, 0, "score only the first N test examples (0: all)"),
    ] + [t for t in TOKENIZER if t[0] != "speech-vocab"] + MODEL + TRAIN + DECODE),
    "bits-report": ("storage cost of raw signals versus tokens", [
        ("audio-seconds", float, 1.0, "audio duration"),
        ("token-rate", float, 50.0, "speech tokens per second"),
        ("speech-vocab", int, 200, "speech vocabulary size"),
        ("image-hw", _hw, "224x224", "raw image size"),
        ("image-tokens", int, 32, "tokens per image"),
        ("image-vocab", int, 8192, "image vocabulary size"),
    ]),
}

REQUIRED = {
    "train-tokenizers": ["corpus", "out"], "tokenize": ["corpus", "tokenizers", "out"],
    "train": ["data", "tokenizers", "out"], "bt": ["model", "tokenizers", "targets", "out"],
    "translate": ["model", "tokenizers", "src", "tgt"], "evaluate": ["model", "tokenizers", "data", "out"],
    "gen-corpus": ["out"], "sweep-speech-vocab": ["out"],
}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _formatter(prog):
    return argparse.HelpFormatter(prog, width=100, max_help_position=30)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trimodal", formatter_class=_formatter,
                     description="Translate between image, speech and text token languages.")
    sub = parser.add_subparsers(dest="command", metavar="command", parser_class=_Parser)
    for name, (helptext, flags) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext, formatter_class=_formatter)
        seen = set()
        for flag, typ, default, text in COMMON + flags:
            if flag in seen:
                continue
            seen.add(flag)
            value = typ(default) if isinstance(default, str) and typ not in (str,) else default
            shown = "none" if default is None else default
            p.add_argument(f"--{flag}", type=typ, default=value, metavar=_TYPE_NAMES[typ].upper(),
                           help=f"{text} ({_TYPE_NAMES[typ]}, default: {shown})")
    return parser


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace, argv) -> None:
    """Fill flags from --config unless they were given on the command line."""
    if not args.config:
        return
    sub = parser._subparsers._group_actions[0].choices[args.command]
    actions = {a.dest: a for a in sub._actions if a.dest not in ("help", "config")}
    kv = parse_kv(Path(args.config).read_text(), {d.replace("_", "-") for d in actions} | set(actions))
    given = {a.split("=", 1)[0][2:].replace("-", "_") for a in argv if a.startswith("--")}
    for key, raw in kv.items():
        dest = key.replace("-", "_")
        if dest in given:
            continue
        action = actions[dest]
        setattr(args, dest, action.type(raw) if action.type else raw)


def _resolved(args) -> list[str]:
    return [f"{k}={v}" for k, v in sorted(vars(args).items()) if k != "command"]


def _model_cfg(args, vocab_total: int) -> ModelConfig:
    return ModelConfig(vocab_total=vocab_total, d_model=args.d_model, n_heads=args.n_heads,
                       ffn_dim=args.ffn_dim, enc_layers=args.enc_layers, dec_layers=args.dec_layers,
                       max_len=args.max_len)


def _train_cfg(args, seed_purpose="train") -> TrainConfig:
    return TrainConfig(total_steps=args.steps, per_task_batch=args.batch, peak_lr=args.peak_lr,
                       warmup_steps=args.warmup, grad_clip=args.grad_clip, log_every=args.log_every,
                       ckpt_every=args.ckpt_every, dtype=args.dtype,
                       seed=derive_seed(args.seed, seed_purpose))


def _decode_cfg(args, toks: TokenizerSet | None = None) -> DecodeConfig:
    cfg = DecodeConfig(beam_width=args.beam_width)
    if toks is not None:
        cfg = replace(cfg, image_len=toks.grid.cells, speech_max=toks.speech_cap)
    return cfg


def _directions(text: str):
    if text == "all":
        return all_directions()
    return [parse_direction(d) for d in text.split(",") if d]


def _load_tokenized(data: str | Path, split: str):
    return read_token_corpus(Path(data) / f"{split}.tok")


# ---------------------------------------------------------------- commands

def cmd_gen_corpus(args, out: Path, say):
    parts = generate_corpus(out, args.n, args.seed, args.noise_sigma)
    say(" ".join(f"{k}={len(v)}" for k, v in parts.items()))


def fit_tokenizers(corpus: Path, out: Path, args, speech_vocab: int) -> TokenizerSet:
    examples = load_split(corpus, "train")
    toks = train_tokenizers(examples, args.image_vocab, speech_vocab, args.text_vocab,
                            seed=derive_seed(args.seed, "tokenizers"), iters=args.kmeans_iters,
                            speech_cap=args.speech_cap)
    toks.save(out)
    return toks


def cmd_train_tokenizers(args, out: Path, say):
    toks = fit_tokenizers(Path(args.corpus), out, args, args.speech_vocab)
    say(f"vocabulary sizes={toks.vocab.sizes} total={toks.vocab.total}")


def tokenize_corpus(corpus: Path, toks: TokenizerSet, out: Path) -> dict[str, list]:
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    for split in SPLITS:
        recs = tokenize_examples(toks, load_split(corpus, split))
        write_token_corpus(out / f"{split}.tok", recs)
        result[split] = recs
    return result


def cmd_tokenize(args, out: Path, say):
    toks = TokenizerSet.load(args.tokenizers)
    result = tokenize_corpus(Path(args.corpus), toks, out)
    say(" ".join(f"{k}={len(v) // 3}" for k, v in result.items()))


def train_model(records, toks: TokenizerSet, args, out: Path, directions, say, resume=None):
    check_records(records, toks.vocab)
    mcfg = _model_cfg(args, toks.vocab.total)
    params = init_params(mcfg, derive_seed(args.seed, "init"))
    pool = PairPool.from_records(records)
    t0 = time.time()

    def progress(step, values):
        loss = " ".join(f"{k}={v:.4f}" for k, v in values.items())
        say(f"step {step}/{args.steps} {loss} ({time.time() - t0:.0f}s)")

    res = train(params, mcfg, pool, _train_cfg(args), out, directions=directions, resume=resume,
                progress=progress)
    save_checkpoint(out / "final.tmt", mcfg, res.params, {"steps": args.steps})
    plotting.loss_curves(res.log, out / "loss.png")
    return mcfg, res


def cmd_train(args, out: Path, say):
    toks = TokenizerSet.load(args.tokenizers)
    records = _load_tokenized(args.data, "train")
    mode = args.directions
    if mode in ("all", "both") or "2" in mode:
        dirs = all_directions() if mode in ("all", "both") else _directions(mode)
        target = out / "unified" if mode == "both" else out
        train_model(records, toks, args, target, dirs, say, args.resume)
    if mode in ("single", "both"):
        for d in all_directions():
            say(f"single-task run {direction_name(*d)}")
            train_model(records, toks, args, out / "single" / direction_name(*d), [d], say)
    if mode not in ("all", "both", "single") and "2" not in mode:
        raise ValueError(f"unknown --directions value {mode!r}")


def _load_model(path, toks: TokenizerSet) -> Model:
    cfg, params, _ = load_checkpoint(path)
    return Model(cfg, params, toks.vocab)


def cmd_bt(args, out: Path, say):
    toks = TokenizerSet.load(args.tokenizers)
    model = _load_model(args.model, toks)
    tgt = Modality.from_letter(args.target_modality)
    if args.sources:
        sources = tuple(Modality.from_letter(s) for s in args.sources.split(","))
    else:
        sources = tuple(m for m in Modality if m != tgt)
    bt_cfg = BtConfig(sources, args.decode_mode, args.continue_lr)
    targets = [(i, s) for i, s in read_token_corpus(args.targets) if s.modality == tgt]
    res = back_translate(model, targets, bt_cfg, _decode_cfg(args, toks))
    out.mkdir(parents=True, exist_ok=True)
    write_token_corpus(out / "pseudo.tok", res.records)
    (out / "bt_report.txt").write_text(res.summary() + "\n")
    say(res.summary())
    if args.continue_steps:
        if not args.data:
            raise UsageError("--continue-steps needs --data")
        real = _load_tokenized(args.data, "train")
        tcfg = TrainConfig(total_steps=args.continue_steps, per_task_batch=args.batch,
                           warmup_steps=args.warmup, dtype=args.dtype,
                           seed=derive_seed(args.seed, "continue"))
        cont = continue_training(model.params, model.cfg, toks.vocab, real, res.records, tcfg, bt_cfg,
                                 out / "continued")
        save_checkpoint(out / "final.tmt", model.cfg, cont.params, {"continued": args.continue_steps})


def cmd_translate(args, out: Path | None, say):
    toks = TokenizerSet.load(args.tokenizers)
    model = _load_model(args.model, toks)
    src, tgt = Modality.from_letter(args.src), Modality.from_letter(args.tgt)
    if src == Modality.IMAGE:
        raw = read_ppm(args.input)
    elif src == Modality.SPEECH:
        raw = read_features(args.input)
    else:
        raw = sys.stdin.read() if args.input == "-" else Path(args.input).read_text(encoding="utf-8")
        raw = raw.rstrip("\n")
    result = decode_mod.translate(model, toks, raw, src, tgt, _decode_cfg(args, toks), args.decode_mode)
    dest = args.output
    if dest != "-" and out is not None:
        out.mkdir(parents=True, exist_ok=True)
        dest = str(out / dest)
    if tgt == Modality.TEXT:
        if dest == "-":
            sys.stdout.write(result + "\n")
        else:
            Path(dest).write_text(result + "\n", encoding="utf-8")
        return
    if dest == "-":
        raise UsageError("image and speech outputs need --output PATH")
    (write_ppm if tgt == Modality.IMAGE else write_features)(dest, result)
    say(f"wrote {dest}")


def evaluate_model(model: Model, toks: TokenizerSet, test, directions, args):
    dcfg = _decode_cfg(args, toks)
    return [evaluate_direction(model, toks, test, d, dcfg, args.decode_mode) for d in directions]


def _test_set(data, split, limit):
    test = group_examples(_load_tokenized(data, split))
    if limit:
        test = dict(list(test.items())[:limit])
    return test


def cmd_evaluate(args, out: Path, say):
    toks = TokenizerSet.load(args.tokenizers)
    model = _load_model(args.model, toks)
    test = _test_set(args.data, args.split, args.limit)
    dirs = _directions(args.directions)
    reports = evaluate_model(model, toks, test, dirs, args)
    out.mkdir(parents=True, exist_ok=True)
    write_predictions(out / "predictions.tsv", reports)
    text = format_report(reports)
    groups = [r.direction for r in reports]
    series = {"unified": [plotting.headline(r.scores) for r in reports]}
    if args.single_dir:
        singles = []
        for d in dirs:
            m = _load_model(Path(args.single_dir) / direction_name(*d) / "final.tmt", toks)
            singles += evaluate_model(m, toks, test, [d], args)
        write_predictions(out / "predictions_single.tsv", singles)
        text = format_comparison(singles, reports)
        series = {"single": [plotting.headline(r.scores) for r in singles], **series}
    (out / "report.txt").write_text(text)
    plotting.grouped_bars(groups, series, out / "scores.png", "BLEU-4 / token accuracy",
                          f"{args.split} split")
    say(text)


def run_sweep_size(corpus: Path, out: Path, size: int, args, say) -> dict:
    """Tokenizers, model and scores for one speech vocabulary size."""
    toks = fit_tokenizers(corpus, out / "tokenizers", args, size)
    recs = tokenize_corpus(corpus, toks, out / "data")
    _, res = train_model(recs["train"], toks, args, out / "model", all_directions(), say)
    model = Model(_model_cfg(args, toks.vocab.total), res.params, toks.vocab)
    test = _test_set(out / "data", "test", args.limit)
    s2t, i2s = evaluate_model(model, toks, test, [(Modality.SPEECH, Modality.TEXT),
                                                  (Modality.IMAGE, Modality.SPEECH)], args)
    row = {"size": size, "s2t_wer": s2t.scores.get("wer", float("nan")),
           **{f"i2s_{k}": v for k, v in i2s.scores.items()}}
    (out / "row.txt").write_text("".join(f"{k}={v}\n" for k, v in row.items()))
    return row


SWEEP_COLUMNS = [("s2t_wer", "WER s2t"), ("i2s_bleu4", "BLEU-4 i2s"), ("i2s_rouge_l", "ROUGE-L i2s"),
                 ("i2s_cider", "CIDEr i2s"), ("i2s_wer", "WER i2s")]


def format_sweep(rows) -> str:
    header = ["speech vocab"] + [h for _, h in SWEEP_COLUMNS]
    body = [[str(r["size"])] + [f"{r[k]:.4f}" for k, _ in SWEEP_COLUMNS] for r in rows]
    widths = [max(len(x[i]) for x in [header] + body) for i in range(len(header))]
    fmt = lambda r: "  ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
    return "\n".join([fmt(header), fmt(["-" * w for w in widths])] + [fmt(r) for r in body]) + "\n"


def cmd_sweep(args, out: Path, say):
    sizes = args.sizes
    if len(sizes) < 2:
        raise ValueError("a sweep needs at least two sizes")
    corpus = Path(args.corpus) if args.corpus else out / "corpus"
    if not args.corpus:
        generate_corpus(corpus, args.n, args.seed, args.noise_sigma)
    rows = []
    for size in sizes:
        say(f"speech vocabulary {size}")
        try:
            rows.append(run_sweep_size(corpus, out / f"v{size}", size, args, say))
        except Exception as exc:
            raise type(exc)(f"sweep size {size}: {exc}") from exc
    text = format_sweep(rows)
    (out / "sweep_report.txt").write_text(text)
    plotting.sweep_plot(sizes, [r["s2t_wer"] for r in rows], [r["i2s_bleu4"] for r in rows],
                        out / "sweep.png")
    say(text)


def cmd_bits(args, out: Path | None, say):
    h, w = args.image_hw
    rep = bits_report(args.audio_seconds, args.token_rate, args.speech_vocab, (h, w),
                      args.image_tokens, args.image_vocab)
    text = "\n".join(rep.lines()) + "\n"
    sys.stdout.write(text)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "bits_report.txt").write_text(text)


HANDLERS = {
    "gen-corpus": cmd_gen_corpus, "train-tokenizers": cmd_train_tokenizers, "tokenize": cmd_tokenize,
    "train": cmd_train, "bt": cmd_bt, "translate": cmd_translate, "evaluate": cmd_evaluate,
    "sweep-speech-vocab": cmd_sweep, "bits-report": cmd_bits,
}

ERROR_CODES = [
    (UsageError, "usage", 1),
    (ConfigError, "config", 2),
    (decode_mod.ConfigError, "config", 2),
    (InsufficientDataError, "insufficient-data", 2),
    (SequenceTooLongError, "length", 2),
    (LengthError, "length", 2),
    (NoFinishError, "no-finish", 2),
    (NonFiniteGradientError, "non-finite", 2),
    (OSError, "io", 2),
    (IndexError, "range", 2),
    (ValueError, "invalid-argument", 2),
]


def _origin(exc: BaseException) -> str:
    """Short name of the innermost package module the exception passed through."""
    name, tb = "cli", exc.__traceback__
    while tb is not None:
        mod = tb.tb_frame.f_globals.get("__name__", "")
        if mod.startswith(__package__ + "."):
            name = mod.rsplit(".", 1)[-1]
        tb = tb.tb_next
    return name


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if not argv:
            raise UsageError("missing command")
        if argv[0] in ("-h", "--help") or (len(argv) > 1 and argv[1] in ("-h", "--help")):
            try:
                parser.parse_args(argv)
            except SystemExit:
                return 0
        args = parser.parse_args(argv)
        _apply_config(parser, args, argv)
        missing = [f"--{r}" for r in REQUIRED.get(args.command, []) if getattr(args, r.replace("-", "_")) is None]
        if missing:
            raise UsageError(f"{args.command} requires {', '.join(missing)}")
        out = Path(args.out) if args.out else None
        say = lambda msg: print(msg, file=sys.stderr, flush=True)
        say(f"command={args.command} seed={args.seed}")
        say("config: " + " ".join(_resolved(args)))
        HANDLERS[args.command](args, out, say)
        return 0
    except Exception as exc:
        for cls, code, status in ERROR_CODES:
            if isinstance(exc, cls):
                msg = " ".join(str(exc).split())
                prefix = "" if cls is UsageError else f"{_origin(exc)}: "
                print(f"error: {code}: {prefix}{msg}", file=sys.stderr)
                return status
        raise


if __name__ == "__main__":
    sys.exit(main())
