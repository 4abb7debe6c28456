"""Command-line pipeline: synth, extract, train, embed, score, eval, fuse, gradcheck.

Every subcommand is deterministic under fixed flags, seed, and inputs
(byte-identical outputs). Results and data go to stdout or the named
output files; diagnostics go to stderr. Exit codes: 0 success, 1 some
per-file work failed, 2 unreadable or invalid input, 3 non-finite
training loss, 4 channel/group mismatch, 5 missing utterances or
mismatched trial keys, 6 gradient check failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import os
import sys
import wave
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import tensor as T
from .backbone import (
    CheckpointError,
    ModelSpec,
    NonFiniteLoss,
    SpeakerEmbedder,
    cross_entropy,
    desk_spec,
    fit,
    full_spec,
    load_checkpoint,
    save_checkpoint,
    set_trainable,
)
from .blocks import GroupMismatch, GtfcConfig, apply_block, init_block_params
from .frontend import (
    FrontendConfig,
    ManifestEntry,
    extract_utterance,
    model_features,
    read_manifest,
    sample_chunk,
    speaker_of,
    write_manifest,
)
from .metrics import (
    TARGET,
    DegenerateSet,
    Trial,
    TrialMismatch,
    ZeroVector,
    attach_scores,
    cosine_score,
    eer,
    fuse,
    min_dcf,
    read_score_file,
    read_trial_list,
    write_score_file,
)
from .synth import SynthConfig, build_corpus
from .tensor import Tensor, gradcheck, load_gtf1, no_grad, save_gtf1

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_BAD_INPUT = 2
EXIT_NONFINITE = 3
EXIT_GROUPS = 4
EXIT_KEYS = 5
EXIT_GRADCHECK = 6

BLOCKS = {"none": "none", "se": "se", "c-gtfc": "c_gtfc", "tf-gtfc": "tf_gtfc"}
POSITIONS = {"after-bn": "after_bn", "before-bn": "before_bn",
             "before-conv": "before_conv"}
GATES = {"one-plus-tanh": "one_plus_tanh", "one-plus-elu": "one_plus_elu",
         "sigmoid": "sigmoid"}


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _num_threads() -> int:
    """Worker count for per-utterance parallelism, capped by GTFC_NUM_THREADS."""
    cpus = os.cpu_count() or 1
    raw = os.environ.get("GTFC_NUM_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            _log(f"ignoring non-integer GTFC_NUM_THREADS={raw!r}")
    return cpus


def _resolve_path(path: str, manifest_path) -> Path:
    """Manifest feature paths resolve as written, else next to the manifest."""
    p = Path(path)
    if p.is_absolute() or p.exists():
        return p
    return Path(manifest_path).parent / path


# -- config files -------------------------------------------------------------


def _convert(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    if value.lower() in ("true", "false"):
        return value.lower() == "true"
    return value


def _explicit_flags(argv) -> set:
    flags = set()
    for token in argv:
        if token.startswith("--"):
            flags.add(token[2:].split("=", 1)[0].replace("-", "_"))
    return flags


def apply_config_file(args: argparse.Namespace, argv) -> None:
    """Merge `key=value` lines under explicitly passed flags.

    Keys are flag names with hyphens as underscores. Precedence:
    explicit command-line flag, then config file, then built-in default.
    """
    if not getattr(args, "config", None):
        return
    explicit = _explicit_flags(argv)
    with open(args.config, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{args.config}:{lineno}: expected key=value")
            key = key.strip().replace("-", "_")
            if not hasattr(args, key):
                raise ValueError(f"{args.config}:{lineno}: unknown key {key!r}")
            if key not in explicit:
                setattr(args, key, _convert(value.strip()))


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    config = SynthConfig(speakers=args.speakers,
                         train_utts=args.utts_per_speaker,
                         eval_utts=args.eval_utts,
                         trials=args.trials)
    try:
        counts = build_corpus(args.out_dir, args.seed, config)
    except ValueError as exc:
        _log(f"synth: {exc}")
        return EXIT_BAD_INPUT
    _log(f"synth: wrote {counts['train']} train and {counts['eval']} eval "
         f"utterances, {counts['trials']} trials under {args.out_dir}")
    return EXIT_OK


def _extract_one(path: Path, feat_dir: Path, config: FrontendConfig) -> ManifestEntry:
    record = extract_utterance(path, config)
    feats = model_features(record)
    out_path = feat_dir / (path.stem + ".gtf")
    save_gtf1(out_path, feats)
    return ManifestEntry(path.stem, speaker_of(path.stem), str(out_path),
                         feats.shape[0])


def cmd_extract(args) -> int:
    wav_dir = Path(args.wav_dir)
    if not wav_dir.is_dir():
        _log(f"extract: {wav_dir} is not a readable directory")
        return EXIT_BAD_INPUT
    try:
        wavs = sorted(wav_dir.glob("*.wav"))
    except OSError as exc:
        _log(f"extract: cannot list {wav_dir}: {exc}")
        return EXIT_BAD_INPUT
    feat_dir = Path(args.feat_dir)
    feat_dir.mkdir(parents=True, exist_ok=True)
    config = FrontendConfig()
    entries = []
    failed = 0
    with ThreadPoolExecutor(max_workers=_num_threads()) as pool:
        futures = [pool.submit(_extract_one, p, feat_dir, config) for p in wavs]
        for path, future in zip(wavs, futures):
            try:
                entries.append(future.result())
            except (ValueError, OSError, EOFError, wave.Error) as exc:
                failed += 1
                _log(f"extract: {path.name}: {exc}")
    write_manifest(args.manifest_out, entries)
    _log(f"extract: {len(entries)} utterances written, {failed} failed")
    return EXIT_PARTIAL if failed else EXIT_OK


def _load_dataset(manifest_path) -> tuple:
    entries = read_manifest(manifest_path)
    speakers = sorted({e.speaker_id for e in entries})
    label_of = {s: i for i, s in enumerate(speakers)}
    dataset = []
    for e in entries:
        feats = load_gtf1(_resolve_path(e.path, manifest_path))
        dataset.append((feats, label_of[e.speaker_id]))
    return dataset, speakers


def cmd_train(args) -> int:
    try:
        dataset, speakers = _load_dataset(args.manifest)
    except (OSError, ValueError) as exc:
        _log(f"train: cannot read manifest: {exc}")
        return EXIT_BAD_INPUT
    if len(speakers) < 2:
        _log(f"train: need at least 2 speakers, manifest has {len(speakers)}")
        return EXIT_BAD_INPUT
    kind = BLOCKS[args.block]
    gtfc = GtfcConfig(p=float(args.p), G=args.groups, gate_op=GATES[args.gate])
    spec_fn = desk_spec if args.model_spec == "desk" else full_spec
    try:
        spec = spec_fn(len(speakers), kind, POSITIONS[args.pos], gtfc)
        model = SpeakerEmbedder(spec, seed=args.seed)
    except GroupMismatch as exc:
        _log(f"train: {exc}")
        return EXIT_GROUPS
    frontend_config = FrontendConfig()

    def chunk(feats, chunk_seed):
        return sample_chunk(feats, chunk_seed, frontend_config).features

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_lines = []

    def log_fn(step, loss, lr):
        log_lines.append(f"{step}\t{loss!r}\t{lr!r}")

    try:
        result = fit(model, dataset, epochs=args.epochs,
                     batch_size=args.batch_size, seed=args.seed,
                     chunk_fn=chunk, lr=args.lr, log_fn=log_fn)
    except NonFiniteLoss as exc:
        (out_dir / "train_log.txt").write_text("\n".join(log_lines) + "\n")
        _log(f"train: {exc}")
        return EXIT_NONFINITE
    save_checkpoint(model, out_dir)
    (out_dir / "train_log.txt").write_text("\n".join(log_lines) + "\n")
    losses = " ".join(f"{v:.4f}" for v in result.epoch_losses)
    _log(f"train: {result.steps} steps, epoch mean losses: {losses}")
    return EXIT_OK


def cmd_embed(args) -> int:
    try:
        model = load_checkpoint(args.ckpt)
    except CheckpointError as exc:
        _log(f"embed: {exc}")
        return EXIT_BAD_INPUT
    try:
        entries = read_manifest(args.manifest)
    except (OSError, ValueError) as exc:
        _log(f"embed: cannot read manifest: {exc}")
        return EXIT_BAD_INPUT
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def one(entry):
        feats = load_gtf1(_resolve_path(entry.path, args.manifest))
        save_gtf1(out_dir / f"{entry.utt_id}.gtf", model.embed(feats))

    failed = 0
    with no_grad():
        with ThreadPoolExecutor(max_workers=_num_threads()) as pool:
            futures = [pool.submit(one, e) for e in entries]
            for entry, future in zip(entries, futures):
                try:
                    future.result()
                except (ValueError, OSError) as exc:
                    failed += 1
                    _log(f"embed: {entry.utt_id}: {exc}")
    _log(f"embed: {len(entries) - failed} embeddings written, {failed} failed")
    return EXIT_PARTIAL if failed else EXIT_OK


def cmd_score(args) -> int:
    try:
        rows = read_trial_list(args.trials)
    except (OSError, TrialMismatch) as exc:
        _log(f"score: {exc}")
        return EXIT_BAD_INPUT
    embed_dir = Path(args.embeds)
    needed = []
    for _, enroll, test in rows:
        for utt in (enroll, test):
            if utt not in needed:
                needed.append(utt)
    missing = [u for u in needed if not (embed_dir / f"{u}.gtf").is_file()]
    if missing:
        _log(f"score: missing embeddings for: {' '.join(missing)}")
        return EXIT_KEYS
    embeds = {u: load_gtf1(embed_dir / f"{u}.gtf") for u in needed}
    try:
        trials = [Trial(e, t, label, cosine_score(embeds[e], embeds[t]))
                  for label, e, t in rows]
    except ZeroVector as exc:
        _log(f"score: {exc}")
        return EXIT_PARTIAL
    write_score_file(args.out, trials)
    _log(f"score: {len(trials)} trials scored")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        rows = read_trial_list(args.trials)
        scores = read_score_file(args.scores)
    except (OSError, TrialMismatch) as exc:
        _log(f"eval: {exc}")
        return EXIT_BAD_INPUT
    try:
        trials = attach_scores(rows, scores)
    except TrialMismatch as exc:
        _log(f"eval: {exc}")
        return EXIT_KEYS
    try:
        value, _ = eer(trials)
        dcf = min_dcf(trials)
    except DegenerateSet as exc:
        _log(f"eval: {exc}")
        return EXIT_BAD_INPUT
    print(f"EER={value * 100:.2f}% minDCF={dcf:.4f}")
    return EXIT_OK


def cmd_fuse(args) -> int:
    try:
        rows_a = read_score_file(args.scores_a)
        rows_b = read_score_file(args.scores_b)
    except (OSError, TrialMismatch) as exc:
        _log(f"fuse: {exc}")
        return EXIT_BAD_INPUT
    trials_a = [Trial(e, t, TARGET, s) for e, t, s in rows_a]
    trials_b = [Trial(e, t, TARGET, s) for e, t, s in rows_b]
    try:
        fused = fuse(trials_a, trials_b)
    except TrialMismatch as exc:
        _log(f"fuse: {exc}")
        return EXIT_KEYS
    write_score_file(args.out, fused)
    _log(f"fuse: {len(fused)} fused scores written")
    return EXIT_OK


# -- gradient checking ----------------------------------------------------------


def _block_gradcheck(kind: str, p: float, groups: int, seed: int):
    """Scalar loss over one block's input and parameters, plus its leaves."""
    rng = np.random.default_rng(seed)
    channels = {"se": 8, "c_gtfc": 6, "tf_gtfc": 2 * groups}[kind]
    config = GtfcConfig(p=p, G=groups)
    params = init_block_params(kind, channels, config, r=4, seed=seed + 1)
    # Freshly initialized gates (gamma=beta=0, rho=0) block gradient flow to
    # the attention parameters, so perturb them to exercise the full graph.
    if kind == "c_gtfc":
        params.gamma = Tensor(rng.normal(size=channels), requires_grad=True)
        params.beta = Tensor(rng.normal(size=channels), requires_grad=True)
    elif kind == "tf_gtfc":
        params.rho = Tensor(np.asarray(rng.normal()), requires_grad=True)
        params.tau = Tensor(np.asarray(rng.normal()), requires_grad=True)
    x = Tensor(rng.standard_normal((2, channels, 4, 7)), requires_grad=True)
    projection = rng.standard_normal(x.shape)
    names = list(params.trainable())

    def loss(x_in, *leaves):
        rebuilt = dataclasses.replace(params, **dict(zip(names, leaves)))
        out = apply_block(kind, x_in, rebuilt, config)
        return T.reduce_sum(out * Tensor(projection))

    return loss, [x] + [params.trainable()[n] for n in names]


def _backbone_gradcheck(seed: int):
    """Cross-entropy over a 2-stage embedder; every trainable leaf checked."""
    rng = np.random.default_rng(seed)
    spec = ModelSpec([4, 8], [1, 1], 8, 3, input_mels=6)
    model = SpeakerEmbedder(spec, seed=seed + 1)
    maps = Tensor(rng.standard_normal((2, 1, 6, 12)), requires_grad=True)
    labels = np.array([0, 2])
    params = model.trainable()
    names = list(params)

    def loss(x_in, *leaves):
        for name, leaf in zip(names, leaves):
            set_trainable(model, name, leaf)
        _, logits = model.forward(x_in, train=True, update=False)
        return cross_entropy(logits, labels)

    return loss, [maps] + [params[n] for n in names]


def cmd_gradcheck(args) -> int:
    # Gradient checks always run in 64-bit regardless of --precision.
    T.set_default_dtype("f64")
    try:
        if args.block == "backbone":
            loss, leaves = _backbone_gradcheck(args.seed)
        else:
            loss, leaves = _block_gradcheck(BLOCKS[args.block], float(args.p),
                                            args.groups, args.seed)
        report = gradcheck(loss, leaves, step=1e-5, tol=1e-4)
    except GroupMismatch as exc:
        _log(f"gradcheck: {exc}")
        return EXIT_GROUPS
    print(f"block={args.block} max_rel_error={report.max_rel_error:.6e}")
    if report.passed:
        return EXIT_OK
    idx, flat, analytic, numeric = report.worst
    _log(f"gradcheck: worst coordinate input={idx} element={flat} "
         f"analytic={analytic!r} numeric={numeric!r}")
    return EXIT_GRADCHECK


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gtfc",
        description="Speaker-verification pipeline with GTFC recalibration blocks.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0,
                        help="seed for all randomness (default 0)")
    common.add_argument("--precision", choices=("f32", "f64"), default="f32",
                        help="compute precision (default f32)")
    common.add_argument("--config", default=None, metavar="PATH",
                        help="key=value file; explicit flags take precedence")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic multi-speaker corpus")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--speakers", type=int, default=8)
    p.add_argument("--utts-per-speaker", type=int, default=40)
    p.add_argument("--eval-utts", type=int, default=10)
    p.add_argument("--trials", type=int, default=400)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("extract", parents=[common],
                       help="compute features for every WAV in a directory")
    p.add_argument("--wav-dir", required=True)
    p.add_argument("--manifest-out", required=True)
    p.add_argument("--feat-dir", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", parents=[common],
                       help="train a speaker embedder on extracted features")
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-spec", choices=("desk", "full"), default="desk")
    p.add_argument("--block", choices=tuple(BLOCKS), default="none")
    p.add_argument("--p", type=float, default=2, choices=(1.0, 2.0),
                   help="Lp pooling exponent")
    p.add_argument("--groups", type=int, default=8,
                   help="channel groups for tf-gtfc")
    p.add_argument("--gate", choices=tuple(GATES), default="one-plus-tanh")
    p.add_argument("--pos", choices=tuple(POSITIONS), default="after-bn")
    p.add_argument("--out", required=True, help="checkpoint directory")
    p.add_argument("--epochs", type=int, default=5)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--lr", type=float, default=1e-3)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("embed", parents=[common],
                       help="embed every manifest utterance with a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True, help="embedding directory")
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("score", parents=[common],
                       help="cosine-score a trial list from embeddings")
    p.add_argument("--embeds", required=True)
    p.add_argument("--trials", required=True)
    p.add_argument("--out", required=True, help="score file")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("eval", parents=[common],
                       help="report EER and minDCF for a score file")
    p.add_argument("--scores", required=True)
    p.add_argument("--trials", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("fuse", parents=[common],
                       help="equal-weight fusion of two score files")
    p.add_argument("--scores-a", required=True)
    p.add_argument("--scores-b", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="compare analytic and numeric gradients")
    p.add_argument("--block", choices=("se", "c-gtfc", "tf-gtfc", "backbone"),
                   required=True)
    p.add_argument("--p", type=float, default=2, choices=(1.0, 2.0))
    p.add_argument("--groups", type=int, default=8)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        apply_config_file(args, argv)
    except (OSError, ValueError) as exc:
        _log(f"config: {exc}")
        return EXIT_BAD_INPUT
    T.set_default_dtype(args.precision)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
