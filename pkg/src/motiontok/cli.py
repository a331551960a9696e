"""Command-line pipeline: synthetic corpus generation, training, lexicon
building, tokenization, evaluation, detection, composition, and the K sweep.

One JSON config file drives every command; flags override config values.
Every output file starts with a header carrying the config digest and seed so
results stay traceable to the run that produced them.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .augment import AugmentRanges, make_view_pair
from .data import (LabeledCorpus, SkeletonSequence, center_normalize, generate_synthetic_corpus,
                   load_corpus, save_corpus, save_sequence)
from .lexicon import (Lexicon, build_lexicon, load_lexicon, save_lexicon, segment,
                      tokenize_corpus, assign, write_token_streams)
from .metrics import MetricsReport, entropy_table, kendalls_tau, ngram_entropy, nmi, detection_map
from .apps import build_instance_library, compose, detect, learn_acton_class_map
from .tan import (TanConfig, TanWeights, checkpoint_digest, embed_sequence,
                  load_checkpoint, save_checkpoint)
from .train import TrainConfig, train_tan, write_history


@dataclass(frozen=True)
class SynthOptions:
    primitives: int = 8
    sequences: int = 60
    primitives_per_sequence: int = 6
    frames_per_primitive: int = 64
    joints: int = 8
    fps: float = 30.0
    pose_spread: float = 0.0


@dataclass(frozen=True)
class LexiconOptions:
    k: int = 16
    feature_space: str = "projection"
    max_iters: int = 300
    tol: float = 1e-6
    context_window: int | None = None  # None: the encoder's sequence_length


@dataclass(frozen=True)
class MetricOptions:
    n_max: int = 4
    tau_pairs: int = 10
    eval_fraction: float = 0.2
    sweep_k: tuple[int, ...] = tuple(range(10, 151, 10))


@dataclass(frozen=True)
class DetectionOptions:
    scales_seconds: tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    stride: int | None = None  # None: quarter of each scale
    nms_iou: float = 0.5
    map_theta: float = 0.3


@dataclass(frozen=True)
class CompositionOptions:
    words: int = 8
    boundary_threshold: float = 1.0
    blend_frames: int = 5


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    threads: int = 1
    profile: str = "desk"
    tan: TanConfig = field(default_factory=TanConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentRanges = field(default_factory=AugmentRanges)
    synth: SynthOptions = field(default_factory=SynthOptions)
    lexicon: LexiconOptions = field(default_factory=LexiconOptions)
    metrics: MetricOptions = field(default_factory=MetricOptions)
    detection: DetectionOptions = field(default_factory=DetectionOptions)
    composition: CompositionOptions = field(default_factory=CompositionOptions)

    def digest(self) -> str:
        data = asdict(self)
        data.pop("threads")  # worker count never changes results
        blob = json.dumps(data, sort_keys=True, default=list).encode()
        return hashlib.sha256(blob).hexdigest()[:12]


DESK_TAN = dict(hidden_dim=64, encoder_layers=2, attention_heads=4,
                projection_dim=32, sequence_length=64)
DESK_TRAIN = dict(batch_size=8, epochs=30, warmup_epochs=3, peak_lr=2e-3)
DESK_LEXICON = dict(context_window=16)
PAPER_TAN = dict(hidden_dim=512, encoder_layers=3, attention_heads=8,
                 projection_dim=128, sequence_length=64)
PAPER_TRAIN = dict(batch_size=32, epochs=500, warmup_epochs=50, peak_lr=2.5e-5)
PAPER_LEXICON: dict = {}


def make_config(profile: str = "desk", seed: int = 0, overrides: dict | None = None,
                ) -> PipelineConfig:
    """Build a config from a named profile plus nested override dicts."""
    if profile == "desk":
        tan_kw, train_kw, lex_kw = dict(DESK_TAN), dict(DESK_TRAIN), dict(DESK_LEXICON)
    elif profile == "paper":
        tan_kw, train_kw, lex_kw = dict(PAPER_TAN), dict(PAPER_TRAIN), dict(PAPER_LEXICON)
    else:
        raise ValueError(f"unknown profile {profile!r}")
    sections: dict[str, dict] = {"tan": tan_kw, "train": train_kw, "lexicon": lex_kw}
    for name in ("augment", "synth", "metrics", "detection", "composition"):
        sections[name] = {}
    top: dict = {}
    for key, value in (overrides or {}).items():
        if key in sections:
            sections[key].update(value)
        elif key in ("seed", "threads", "profile"):
            top[key] = value
        else:
            raise ValueError(f"unknown config section {key!r}")
    train_kw = dict(sections["train"])
    train_kw.setdefault("seed", top.get("seed", seed))
    train_kw.setdefault("frames", sections["tan"].get("sequence_length", 64))
    for name, cls in (("metrics", MetricOptions), ("detection", DetectionOptions)):
        for f in fields(cls):
            if f.name in sections[name] and isinstance(sections[name][f.name], list):
                sections[name][f.name] = tuple(sections[name][f.name])
    return PipelineConfig(
        seed=top.get("seed", seed),
        threads=top.get("threads", 1),
        profile=profile,
        tan=TanConfig(**sections["tan"]),
        train=TrainConfig(**train_kw),
        augment=AugmentRanges(**sections["augment"]),
        synth=SynthOptions(**sections["synth"]),
        lexicon=LexiconOptions(**sections["lexicon"]),
        metrics=MetricOptions(**sections["metrics"]),
        detection=DetectionOptions(**sections["detection"]),
        composition=CompositionOptions(**sections["composition"]),
    )


def load_config(path: str | Path | None, profile: str | None = None,
                seed: int | None = None, threads: int | None = None) -> PipelineConfig:
    """Config file merged under a profile; explicit flags win over the file."""
    overrides = {}
    file_profile = None
    if path is not None:
        overrides = json.loads(Path(path).read_text())
        file_profile = overrides.pop("profile", None)
    if seed is not None:
        overrides["seed"] = seed
    if threads is not None:
        overrides["threads"] = threads
    chosen = profile or file_profile or "desk"
    return make_config(profile=chosen, seed=overrides.get("seed", 0),
                       overrides=overrides)


# --- pipeline helpers --------------------------------------------------------------


def split_corpus(corpus: LabeledCorpus, eval_fraction: float = 0.2,
                 ) -> tuple[LabeledCorpus, LabeledCorpus]:
    """Deterministic train/eval split by sequence index (last fraction is eval)."""
    n = len(corpus.sequences)
    cut = max(1, int(round(n * (1.0 - eval_fraction))))
    cut = min(cut, n - 1) if n > 1 else n
    make = lambda lo, hi: LabeledCorpus(
        sequences=corpus.sequences[lo:hi],
        frame_labels=corpus.frame_labels[lo:hi],
        primitive_count=corpus.primitive_count,
    )
    return make(0, cut), make(cut, n)


def raw_embed(seq: SkeletonSequence) -> np.ndarray:
    """Raw-coordinate baseline features: center-normalized flattened joints."""
    return center_normalize(seq).flat()


def alignment_tau(corpus: LabeledCorpus, ranges: AugmentRanges, pairs: int, seed: int,
                  embed_fn, crop_len: int | None = None) -> float:
    """Mean Kendall's Tau over speed-warped view pairs of corpus sequences.

    crop_len restricts each pair to a window of that many source frames (the
    encoder's training length, so retrieval runs in the regime the embeddings
    were shaped for); None warps whole sequences.
    """
    taus = []
    for idx in range(pairs):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 53, idx]))
        seq = corpus.sequences[idx % len(corpus.sequences)]
        if crop_len is not None and seq.frames > crop_len:
            start = int(rng.integers(0, seq.frames - crop_len + 1))
            seq = SkeletonSequence(data=seq.data[start:start + crop_len], fps=seq.fps)
        vp = make_view_pair(seq, rng, ranges)
        taus.append(kendalls_tau(embed_fn(vp.view_a), embed_fn(vp.view_b)))
    return float(np.mean(taus))


def tan_embed_fn(weights: TanWeights):
    return lambda seq: embed_sequence(seq, weights)


def corpus_nmi(corpus: LabeledCorpus, streams_labels: list[np.ndarray]) -> float:
    """Frame-label NMI of cluster assignments against ground truth."""
    truth = np.concatenate(corpus.frame_labels)
    clusters = np.concatenate(streams_labels)
    return nmi(truth, clusters)


def tokenize_threaded(corpus: LabeledCorpus, weights: TanWeights, lexicon: Lexicon,
                      threads: int = 1):
    """tokenize_corpus, optionally fanned out across a thread pool.

    Results are gathered by sequence index, so the output is identical at any
    thread count."""
    if threads <= 1:
        return tokenize_corpus(corpus, weights, lexicon)
    space = lexicon.metadata.get("feature_space", "projection")
    window = lexicon.metadata.get("context_window")

    def one(seq):
        features = embed_sequence(seq, weights, space=space, window=window)
        labels = assign(features, lexicon)
        return segment(labels), labels

    with ThreadPoolExecutor(max_workers=threads) as pool:
        results = list(pool.map(one, corpus.sequences))
    return [r[0] for r in results], [r[1] for r in results]


def truth_intervals(labels: np.ndarray) -> list[tuple[int, int, int]]:
    """(class, start, end) runs of a ground-truth frame-label array."""
    stream = segment(labels)
    return [(acton, start, end) for start, end, acton in stream.segments]


def evaluate(corpus: LabeledCorpus, weights: TanWeights, lexicon: Lexicon,
             config: PipelineConfig, threads: int = 1) -> MetricsReport:
    """Alignment, clustering, and token-entropy metrics on one corpus slice."""
    streams, frame_actons = tokenize_threaded(corpus, weights, lexicon, threads)
    rows = entropy_table(streams, config.metrics.n_max)
    _, f2 = ngram_entropy(streams, 2)
    tau = alignment_tau(corpus, config.augment, config.metrics.tau_pairs,
                        config.seed, tan_embed_fn(weights),
                        crop_len=config.tan.sequence_length)
    return MetricsReport(
        kendalls_tau=tau,
        nmi=corpus_nmi(corpus, frame_actons),
        f2=f2,
        entropy_rows=rows,
        provenance={
            "config_digest": config.digest(),
            "seed": config.seed,
            "lexicon_k": lexicon.k,
            "checkpoint_digest": lexicon.metadata.get("checkpoint_digest"),
        },
    )


def _guard_digest(lexicon: Lexicon, ckpt_digest: str) -> None:
    built_from = lexicon.metadata.get("checkpoint_digest")
    if built_from is not None and built_from != ckpt_digest:
        raise ValueError(
            f"lexicon was built from checkpoint {built_from}, refusing to pair it "
            f"with checkpoint {ckpt_digest}"
        )


# --- commands -----------------------------------------------------------------------


def _header(config: PipelineConfig, extra: dict | None = None) -> list[str]:
    lines = [f"config_digest={config.digest()}", f"seed={config.seed}",
             f"profile={config.profile}"]
    for key, value in (extra or {}).items():
        lines.append(f"{key}={value}")
    return lines


def cmd_gen_synth(config: PipelineConfig, out_dir: Path) -> Path:
    s = config.synth
    corpus = generate_synthetic_corpus(
        s.primitives, s.sequences, s.primitives_per_sequence, s.frames_per_primitive,
        config.seed, joints=s.joints, fps=s.fps, pose_spread=s.pose_spread)
    save_corpus(corpus, out_dir)
    meta = {"config_digest": config.digest(), "seed": config.seed,
            "synth": asdict(s)}
    (out_dir / "meta.json").write_text(json.dumps(meta, sort_keys=True))
    return out_dir


def cmd_train(config: PipelineConfig, corpus_dir: Path, out_ckpt: Path,
              loss: str = "tan") -> Path:
    corpus = load_corpus(corpus_dir)
    train_split, _ = split_corpus(corpus, config.metrics.eval_fraction)
    weights, history = train_tan(train_split, config.tan, config.train,
                                 loss_kind=loss, ranges=config.augment)
    save_checkpoint(weights, out_ckpt)
    write_history(history, out_ckpt.with_suffix(".history.tsv"))
    return out_ckpt


def cmd_build_lexicon(config: PipelineConfig, corpus_dir: Path, ckpt: Path,
                      out_lex: Path) -> Path:
    corpus = load_corpus(corpus_dir)
    train_split, _ = split_corpus(corpus, config.metrics.eval_fraction)
    weights = load_checkpoint(ckpt)
    window = config.lexicon.context_window or config.tan.sequence_length
    lex = build_lexicon(train_split, weights, config.lexicon.k, seed=config.seed,
                        space=config.lexicon.feature_space,
                        checkpoint_digest=checkpoint_digest(ckpt),
                        max_iters=config.lexicon.max_iters, tol=config.lexicon.tol,
                        window=window)
    save_lexicon(lex, out_lex)
    return out_lex


def _load_guarded(ckpt: Path, lex_path: Path) -> tuple[TanWeights, Lexicon]:
    weights = load_checkpoint(ckpt)
    lexicon = load_lexicon(lex_path)
    _guard_digest(lexicon, checkpoint_digest(ckpt))
    return weights, lexicon


def cmd_tokenize(config: PipelineConfig, corpus_dir: Path, ckpt: Path, lex_path: Path,
                 out_path: Path) -> Path:
    corpus = load_corpus(corpus_dir)
    weights, lexicon = _load_guarded(ckpt, lex_path)
    streams, _ = tokenize_threaded(corpus, weights, lexicon, config.threads)
    write_token_streams(streams, out_path, header_lines=_header(config))
    return out_path


def cmd_eval(config: PipelineConfig, corpus_dir: Path, ckpt: Path, lex_path: Path,
             out_dir: Path) -> MetricsReport:
    corpus = load_corpus(corpus_dir)
    _, eval_split = split_corpus(corpus, config.metrics.eval_fraction)
    weights, lexicon = _load_guarded(ckpt, lex_path)
    report = evaluate(eval_split, weights, lexicon, config, config.threads)
    report.save(out_dir)
    # embed the full config so every reported number stays traceable
    (Path(out_dir) / "config.json").write_text(
        json.dumps(asdict(config), sort_keys=True, default=list))
    return report


def corpus_detection_map(eval_split: LabeledCorpus, weights: TanWeights,
                         lexicon: Lexicon, cmap, scales,
                         stride: int | None = None, nms_iou: float = 0.5,
                         theta: float = 0.3,
                         ) -> tuple[float, list[tuple[int, "Detection"]]]:
    """Pooled detection mAP over a corpus.

    Per-sequence intervals are offset far apart on a shared timeline so one
    matching pass scores the whole corpus without cross-sequence overlap.
    """
    all_dets, all_truth, out_rows = [], [], []
    gap = max(s.frames for s in eval_split.sequences) + 1
    for sid, (seq, labels) in enumerate(zip(eval_split.sequences,
                                            eval_split.frame_labels)):
        off = sid * gap
        dets = detect(seq, weights, lexicon, cmap, scales,
                      stride=stride, nms_iou=nms_iou)
        for d in dets:
            all_dets.append((d.class_id, d.start + off, d.end + off, d.confidence))
            out_rows.append((sid, d))
        all_truth.extend((c, s + off, e + off) for c, s, e in truth_intervals(labels))
    return detection_map(all_dets, all_truth, theta), out_rows


def cmd_detect(config: PipelineConfig, corpus_dir: Path, ckpt: Path, lex_path: Path,
               out_path: Path) -> float:
    corpus = load_corpus(corpus_dir)
    train_split, eval_split = split_corpus(corpus, config.metrics.eval_fraction)
    weights, lexicon = _load_guarded(ckpt, lex_path)
    _, train_actons = tokenize_threaded(train_split, weights, lexicon, config.threads)
    cmap = learn_acton_class_map(train_actons, train_split.frame_labels, lexicon.k)
    fps = corpus.sequences[0].fps
    scales = [max(2, int(round(s * fps))) for s in config.detection.scales_seconds]
    score, out_rows = corpus_detection_map(
        eval_split, weights, lexicon, cmap, scales,
        stride=config.detection.stride, nms_iou=config.detection.nms_iou,
        theta=config.detection.map_theta)
    with open(out_path, "w") as fh:
        for line in _header(config, {"map_theta": config.detection.map_theta,
                                     "mAP": f"{score:.6g}"}):
            fh.write(f"# {line}\n")
        fh.write("sequence\tclass\tstart\tend\tconfidence\n")
        for sid, d in out_rows:
            fh.write(f"{sid}\t{d.class_id}\t{d.start}\t{d.end}\t{d.confidence:.6g}\n")
    return score


def cmd_compose(config: PipelineConfig, corpus_dir: Path, ckpt: Path, lex_path: Path,
                out_path: Path) -> Path:
    corpus = load_corpus(corpus_dir)
    weights, lexicon = _load_guarded(ckpt, lex_path)
    streams, _ = tokenize_threaded(corpus, weights, lexicon, config.threads)
    library = build_instance_library(corpus.sequences, streams)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 71]))
    motion = compose(library, config.composition.words,
                     config.composition.boundary_threshold,
                     config.composition.blend_frames, rng)
    save_sequence(motion.sequence, out_path)
    words_path = Path(str(out_path) + ".words.txt")
    with open(words_path, "w") as fh:
        for line in _header(config, {"words": ",".join(map(str, motion.words))}):
            fh.write(f"# {line}\n")
    return out_path


def cmd_sweep_k(config: PipelineConfig, corpus_dir: Path, ckpt: Path,
                out_path: Path) -> Path:
    corpus = load_corpus(corpus_dir)
    train_split, eval_split = split_corpus(corpus, config.metrics.eval_fraction)
    weights = load_checkpoint(ckpt)
    digest = checkpoint_digest(ckpt)
    rows = []
    for k in config.metrics.sweep_k:
        lex = build_lexicon(train_split, weights, k, seed=config.seed,
                            space=config.lexicon.feature_space,
                            checkpoint_digest=digest,
                            window=config.lexicon.context_window
                            or config.tan.sequence_length)
        streams, frame_actons = tokenize_threaded(eval_split, weights, lex,
                                                  config.threads)
        _, f2 = ngram_entropy(streams, 2)
        rows.append((k, corpus_nmi(eval_split, frame_actons), f2))
    with open(out_path, "w") as fh:
        for line in _header(config):
            fh.write(f"# {line}\n")
        fh.write("k\tnmi\tf2\n")
        for k, score, f2 in rows:
            fh.write(f"{k}\t{score:.6g}\t{f2:.6g}\n")
    return out_path


# --- argument parsing ------------------------------------------------------------------


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="motiontok",
        description="Motion tokenization pipeline: contrastive frame embeddings, "
                    "acton lexicons, and token-stream applications.")
    parser.add_argument("--config", type=Path, default=None, help="JSON config file")
    parser.add_argument("--seed", type=int, default=None, help="master seed override")
    parser.add_argument("--threads", type=int, default=None,
                        help="worker threads (1 = fully deterministic)")
    parser.add_argument("--profile", choices=("desk", "paper"), default=None,
                        help="named hyperparameter profile (default: desk, "
                             "unless the config file names one)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic labeled corpus")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("train", help="train the encoder on a corpus")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--loss", choices=("tan", "tcn", "tcc"), default="tan")

    p = sub.add_parser("build-lexicon", help="K-means lexicon from frame embeddings")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--k", type=int, default=None)

    for name, help_text in (("tokenize", "write token streams for a corpus"),
                            ("eval", "alignment/clustering/entropy metrics"),
                            ("detect", "sliding-window action detection"),
                            ("compose", "compose a motion from acton instances")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--corpus", type=Path, required=True)
        p.add_argument("--checkpoint", type=Path, required=True)
        p.add_argument("--lexicon", type=Path, required=True)
        p.add_argument("--out", type=Path, required=True)
        if name == "compose":
            p.add_argument("--words", type=int, default=None)

    p = sub.add_parser("sweep-k", help="NMI and F_2 across a grid of lexicon sizes")
    p.add_argument("--corpus", type=Path, required=True)
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True)
    return parser


def run(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    config = load_config(args.config, profile=args.profile, seed=args.seed,
                         threads=args.threads)
    if getattr(args, "k", None):
        config = _replace_nested(config, "lexicon", {"k": args.k})
    if getattr(args, "words", None):
        config = _replace_nested(config, "composition", {"words": args.words})

    if args.command == "gen-synth":
        args.out.mkdir(parents=True, exist_ok=True)
        cmd_gen_synth(config, args.out)
    elif args.command == "train":
        cmd_train(config, args.corpus, args.out, loss=args.loss)
    elif args.command == "build-lexicon":
        cmd_build_lexicon(config, args.corpus, args.checkpoint, args.out)
    elif args.command == "tokenize":
        cmd_tokenize(config, args.corpus, args.checkpoint, args.lexicon, args.out)
    elif args.command == "eval":
        args.out.mkdir(parents=True, exist_ok=True)
        report = cmd_eval(config, args.corpus, args.checkpoint, args.lexicon, args.out)
        print(report.to_flat_text(), end="")
    elif args.command == "detect":
        score = cmd_detect(config, args.corpus, args.checkpoint, args.lexicon, args.out)
        print(f"mAP@{config.detection.map_theta}={score:.6g}")
    elif args.command == "compose":
        cmd_compose(config, args.corpus, args.checkpoint, args.lexicon, args.out)
    elif args.command == "sweep-k":
        cmd_sweep_k(config, args.corpus, args.checkpoint, args.out)
    return 0


def _replace_nested(config: PipelineConfig, section: str, updates: dict) -> PipelineConfig:
    data = asdict(config)
    data[section].update(updates)
    profile = data.pop("profile")
    seed = data.pop("seed")
    threads = data.pop("threads")
    overrides = {k: v for k, v in data.items()}
    overrides["seed"] = seed
    overrides["threads"] = threads
    return make_config(profile=profile, seed=seed, overrides=overrides)


def main() -> None:
    try:
        sys.exit(run())
    except Exception as exc:  # one-line machine-parsable failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    main()
