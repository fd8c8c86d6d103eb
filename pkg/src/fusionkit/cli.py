"""Command-line surface: decode, wer, ppl, lm-train, synth, bench, export-attn.

Every command is deterministic given its config and seed; primary outputs
are byte-stable across reruns.  Timing lives in a separate stats file so
golden-file comparisons stay meaningful.

The decode/bench config is a flat JSON object; every key can be overridden
by a same-named command line flag.  Keys:

    strategy            ctc-greedy | timesync | delayed | joint
    beam                int
    length_norm         bool (joint strategy)
    max_len_factor      float, label cap relative to the frame count
    top_k               int or null: CTC distribution pruning
    keep_blank          bool, blank always survives pruning
    compress_threshold  float or null: CTC compression threshold
    compress_order      "compress-then-prune" (default) or "prune-then-compress"
    lm_path             LM file (FKLM n-gram or table JSON) for fusion
    lm_weight           float
    scorers             joint strategy: list of {name, kind, weight, ...}
    normalization       lowercase | none (applied by wer)
    seed                int, seeds any decoder scorers without weight files
    jobs                int, utterance-level parallelism
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from fusionkit.core import (
    Posteriorgram,
    ScorerWeights,
    Vocabulary,
    read_posteriorgram,
    read_vocabulary,
    write_posteriorgram,
    write_vocabulary,
)
from fusionkit.ctc import compress_posteriors, greedy_decode, merge_indices, topk_prune
from fusionkit.decoder import (
    Hyperparams,
    InterfaceConfig,
    export_attention,
    load_weights,
    seeded_weights,
)
from fusionkit.lm import (
    NGRAM_MAGIC,
    load_ngram,
    load_table_lm,
    perplexity,
    retokenize,
    save_ngram,
    train_ngram,
    word_perplexity,
)
from fusionkit.metrics import corpus_wer, words
from fusionkit.search import (
    DecodeStats,
    NBestEntry,
    NBestList,
    ScorerHandle,
    delayed_fusion_beam,
    labelsync_beam,
    timesync_ctc_beam,
    write_nbest,
)
from fusionkit.synth import SynthConfig, gen_corpus

DEFAULT_CONFIG = {
    "strategy": "ctc-greedy",
    "beam": 8,
    "length_norm": False,
    "max_len_factor": 1.0,
    "top_k": None,
    "keep_blank": True,
    "compress_threshold": None,
    "compress_order": "compress-then-prune",
    "lm_path": None,
    "lm_weight": 0.0,
    "scorers": [],
    "normalization": "lowercase",
    "seed": 0,
    "jobs": 1,
}


class CliError(Exception):
    pass


def load_lm(path: str | Path):
    text = Path(path).read_text(encoding="utf-8", errors="replace")
    if text.startswith(NGRAM_MAGIC):
        return load_ngram(path)
    return load_table_lm(path)


def load_config(path: str | None, overrides: dict) -> dict:
    cfg = dict(DEFAULT_CONFIG)
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError(f"config file not found: {p}")
        loaded = json.loads(p.read_text(encoding="utf-8"))
        unknown = set(loaded) - set(DEFAULT_CONFIG)
        if unknown:
            raise CliError(f"unknown config keys: {sorted(unknown)}")
        cfg.update(loaded)
    for key, val in overrides.items():
        if val is not None:
            cfg[key] = val
    return cfg


def read_corpus_dir(corpus_dir: str | Path):
    corpus_dir = Path(corpus_dir)
    vocab_path = corpus_dir / "vocab.txt"
    refs_path = corpus_dir / "refs.txt"
    for p in (vocab_path, refs_path):
        if not p.exists():
            raise CliError(f"missing corpus file: {p}")
    vocab = read_vocabulary(vocab_path)
    utts = []
    for line in refs_path.read_text(encoding="utf-8").splitlines():
        utt_id, transcript = line.split("\t", 1)
        pg_path = corpus_dir / f"{utt_id}.fkpg"
        if not pg_path.exists():
            raise CliError(f"missing posteriorgram for {utt_id}: {pg_path}")
        utts.append((utt_id, pg_path, transcript))
    return vocab, utts


def prepare_posteriorgram(pg: Posteriorgram, cfg: dict, vocab: Vocabulary) -> Posteriorgram:
    steps = (
        ("compress", "prune")
        if cfg["compress_order"] == "compress-then-prune"
        else ("prune", "compress")
    )
    for step in steps:
        if step == "compress" and cfg["compress_threshold"] is not None:
            pg = compress_posteriors(pg, merge_indices(pg, float(cfg["compress_threshold"])))
        if step == "prune" and cfg["top_k"] is not None:
            pg = topk_prune(pg, int(cfg["top_k"]), bool(cfg["keep_blank"]), vocab.blank_id)
    return pg


def build_joint_scorers(cfg: dict, vocab: Vocabulary, pg: Posteriorgram):
    scorers = []
    weight_map = {}
    for spec in cfg["scorers"]:
        name, kind = spec["name"], spec["kind"]
        weight_map[name] = float(spec.get("weight", 0.0))
        if kind == "ctc_prefix":
            handle = ScorerHandle(name, kind)
        elif kind in ("ngram", "table"):
            handle = ScorerHandle(name, kind, model=load_lm(spec["path"]))
        elif kind in ("decoder_am", "decoder_lm"):
            if "weights_path" in spec:
                dw = load_weights(spec["weights_path"])
            else:
                hp = Hyperparams(vocab_size=vocab.size)
                dw = seeded_weights(hp, int(spec.get("seed", cfg["seed"])))
            interface = InterfaceConfig(
                kind=spec.get("interface", "prefix"),
                prefix_attention=spec.get("prefix_attention", "causal"),
                prompt=tuple(spec.get("prompt", ())),
            )
            handle = ScorerHandle(name, kind, decoder_weights=dw, interface=interface)
        else:
            raise CliError(f"unknown scorer kind {kind!r}")
        scorers.append(handle.build(vocab, pg))
    return scorers, weight_map


def decode_utterance(pg: Posteriorgram, vocab: Vocabulary, cfg: dict, lm) -> tuple[NBestList, DecodeStats]:
    stats = DecodeStats()
    pg = prepare_posteriorgram(pg, cfg, vocab)
    strategy = cfg["strategy"]
    if strategy == "ctc-greedy":
        t0 = time.perf_counter()
        labels = tuple(greedy_decode(pg, vocab.blank_id))
        path_score = float(np.max(pg.log_probs, axis=1).sum())
        stats.wall_time_s = time.perf_counter() - t0
        stats.audio_seconds = pg.duration_seconds
        stats.peak_live_hypotheses = 1
        nbest = NBestList([NBestEntry(labels, {"ctc": path_score}, path_score, True)])
    elif strategy == "timesync":
        nbest = timesync_ctc_beam(
            pg, vocab, beam=int(cfg["beam"]), lm=lm, lm_weight=float(cfg["lm_weight"]),
            stats=stats,
        )
    elif strategy == "delayed":
        if lm is None:
            raise CliError("delayed fusion needs lm_path")
        nbest = delayed_fusion_beam(
            pg, vocab, lm, float(cfg["lm_weight"]), int(cfg["beam"]), stats=stats
        )
    elif strategy == "joint":
        scorers, weight_map = build_joint_scorers(cfg, vocab, pg)
        weights = ScorerWeights(
            weight_map,
            length_norm=bool(cfg["length_norm"]),
            max_len_factor=float(cfg["max_len_factor"]),
        )
        max_len = max(1, round(weights.max_len_factor * pg.num_frames))
        nbest = labelsync_beam(
            scorers, weights, int(cfg["beam"]), vocab, max_len, stats=stats
        )
        stats.audio_seconds += pg.duration_seconds
    else:
        raise CliError(f"unknown strategy {strategy!r}")
    return nbest, stats


def cmd_decode(args) -> int:
    cfg = load_config(
        args.config,
        {
            "strategy": args.strategy,
            "beam": args.beam,
            "top_k": args.top_k,
            "compress_threshold": args.compress_threshold,
            "lm_path": args.lm_path,
            "lm_weight": args.lm_weight,
            "jobs": args.jobs,
        },
    )
    vocab, utts = read_corpus_dir(args.corpus)
    lm = load_lm(cfg["lm_path"]) if cfg["lm_path"] else None
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)

    def run(item):
        utt_id, pg_path, _ = item
        try:
            pg = read_posteriorgram(pg_path)
            return utt_id, decode_utterance(pg, vocab, cfg, lm)
        except Exception as exc:
            raise CliError(f"decoding {utt_id} ({pg_path}) failed: {exc}") from exc

    jobs = max(1, int(cfg["jobs"]))
    if jobs == 1:
        results = [run(item) for item in utts]
    else:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, utts))
    results.sort(key=lambda kv: kv[0])

    total = DecodeStats()
    hyp_lines = []
    for utt_id, (nbest, stats) in results:
        write_nbest(nbest, vocab, out_dir / f"{utt_id}.nbest")
        hyp_lines.append(f"{utt_id}\t{vocab.text(nbest.best.output_labels(vocab.eos_id))}")
        total.merge(stats)
    (out_dir / "hyps.txt").write_text("\n".join(hyp_lines) + "\n", encoding="utf-8")
    (out_dir / "config.json").write_text(
        json.dumps(cfg, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    (out_dir / "stats.txt").write_text(format_stats(total), encoding="utf-8")
    print(f"decoded {len(results)} utterances -> {out_dir}")
    return 0


def format_stats(stats: DecodeStats) -> str:
    rtf = f"{stats.rtf:.6f}" if stats.rtf is not None else "n/a"
    return (
        f"scorer_evaluations\t{stats.scorer_evaluations}\n"
        f"peak_live_hypotheses\t{stats.peak_live_hypotheses}\n"
        f"peak_candidate_set\t{stats.peak_candidate_set}\n"
        f"steps\t{stats.steps}\n"
        f"wall_time_s\t{stats.wall_time_s:.6f}\n"
        f"audio_seconds\t{stats.audio_seconds:.6f}\n"
        f"rtf\t{rtf}\n"
    )


def read_keyed_lines(path: str | Path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        if not line:
            continue
        key, _, text = line.partition("\t")
        out[key] = text
    return out


def cmd_wer(args) -> int:
    refs = read_keyed_lines(args.refs)
    hyps = read_keyed_lines(args.hyps)
    missing = sorted(set(refs) - set(hyps))
    if missing:
        raise CliError(f"hypotheses missing for ids: {missing[:5]}")
    pairs = [
        (words(refs[k], args.normalization), words(hyps[k], args.normalization))
        for k in sorted(refs)
    ]
    counts = corpus_wer(pairs)
    print(
        f"S\t{counts.substitutions}\nD\t{counts.deletions}\nI\t{counts.insertions}\n"
        f"N\t{counts.ref_length}\nWER\t{counts.wer:.4f}"
    )
    return 0


def cmd_ppl(args) -> int:
    model = load_lm(args.model)
    lines = [
        line for line in Path(args.text).read_text(encoding="utf-8").splitlines() if line
    ]
    if args.normalization != "none":
        lines = [" ".join(words(line, args.normalization)) for line in lines]
    seqs = [retokenize(model.vocab, line) for line in lines]
    token_ppl = perplexity(model, seqs)
    n_words = sum(len(line.split()) for line in lines)
    print(f"token_ppl\t{token_ppl:.4f}")
    if n_words:
        print(f"word_ppl\t{word_perplexity(model, seqs, n_words):.4f}")
    return 0


def cmd_lm_train(args) -> int:
    vocab = read_vocabulary(args.vocab)
    lines = [
        line for line in Path(args.text).read_text(encoding="utf-8").splitlines() if line
    ]
    if args.normalization != "none":
        lines = [" ".join(words(line, args.normalization)) for line in lines]
    corpus = [retokenize(vocab, line) for line in lines]
    model = train_ngram(vocab, corpus, order=args.order, backoff_factor=args.backoff)
    save_ngram(model, args.out)
    print(f"trained order-{args.order} model on {len(corpus)} sequences -> {args.out}")
    return 0


def cmd_synth(args) -> int:
    cfg = SynthConfig(
        seed=args.seed,
        noise=args.noise,
        words_per_utt=(args.min_words, args.max_words),
    )
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_vocabulary(cfg.vocab, out_dir / "vocab.txt")
    ref_lines = []
    for i, (pg, transcript) in enumerate(gen_corpus(cfg, args.utts)):
        utt_id = f"utt{i:04d}"
        write_posteriorgram(pg, out_dir / f"{utt_id}.fkpg")
        ref_lines.append(f"{utt_id}\t{transcript}")
    (out_dir / "refs.txt").write_text("\n".join(ref_lines) + "\n", encoding="utf-8")
    snapshot = {
        "seed": args.seed,
        "noise": args.noise,
        "utts": args.utts,
        "words_per_utt": [args.min_words, args.max_words],
    }
    (out_dir / "synth_config.json").write_text(
        json.dumps(snapshot, sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
    print(f"wrote {args.utts} utterances -> {out_dir}")
    return 0


def cmd_bench(args) -> int:
    cfg = load_config(args.config, {})
    vocab, utts = read_corpus_dir(args.corpus)
    lm = load_lm(cfg["lm_path"]) if cfg["lm_path"] else None
    refs = {utt_id: transcript for utt_id, _, transcript in utts}
    ks = [None if v == "none" else int(v) for v in args.top_k.split(",")]
    taus = [None if v == "none" else float(v) for v in args.compress_threshold.split(",")]
    beams = [int(v) for v in args.beam.split(",")]
    print("top_k\ttau\tbeam\twer\trtf\tpeak_candidates\tscorer_evals")
    for k in ks:
        for tau in taus:
            for beam in beams:
                run_cfg = dict(cfg)
                run_cfg.update({"top_k": k, "compress_threshold": tau, "beam": beam})
                total = DecodeStats()
                pairs = []
                for utt_id, pg_path, transcript in utts:
                    pg = read_posteriorgram(pg_path)
                    nbest, stats = decode_utterance(pg, vocab, run_cfg, lm)
                    total.merge(stats)
                    hyp = vocab.text(nbest.best.output_labels(vocab.eos_id))
                    pairs.append(
                        (words(transcript, cfg["normalization"]), words(hyp, cfg["normalization"]))
                    )
                wer = corpus_wer(pairs).wer
                rtf = f"{total.rtf:.6f}" if total.rtf is not None else "n/a"
                print(
                    f"{k if k is not None else 'none'}\t"
                    f"{tau if tau is not None else 'none'}\t{beam}\t"
                    f"{wer:.4f}\t{rtf}\t{total.peak_candidate_set}\t{total.scorer_evaluations}"
                )
    return 0


def cmd_export_attn(args) -> int:
    vocab = read_vocabulary(args.vocab)
    if args.weights:
        weights = load_weights(args.weights)
    else:
        weights = seeded_weights(Hyperparams(vocab_size=vocab.size), args.seed)
    config = InterfaceConfig(
        kind=args.interface,
        prefix_attention=args.prefix_attention,
        prompt=tuple(retokenize(vocab, args.prompt)) if args.prompt else (),
    )
    audio = None
    if args.audio:
        from fusionkit.core import read_encoder_output

        audio = read_encoder_output(args.audio)
    labels = [vocab.bos_id] + retokenize(vocab, args.text)
    export_attention(weights, config, audio, labels, args.out)
    print(f"attention maps -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusionkit", description="ASR decoding and score-fusion experiments"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("decode", help="decode a corpus directory")
    p.add_argument("corpus")
    p.add_argument("out")
    p.add_argument("--config", default=None)
    p.add_argument("--strategy", default=None)
    p.add_argument("--beam", type=int, default=None)
    p.add_argument("--top-k", dest="top_k", type=int, default=None)
    p.add_argument("--compress-threshold", dest="compress_threshold", type=float, default=None)
    p.add_argument("--lm-path", dest="lm_path", default=None)
    p.add_argument("--lm-weight", dest="lm_weight", type=float, default=None)
    p.add_argument("--jobs", type=int, default=None)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("wer", help="pooled word error rate over keyed files")
    p.add_argument("refs")
    p.add_argument("hyps")
    p.add_argument("--normalization", default="lowercase")
    p.set_defaults(func=cmd_wer)

    p = sub.add_parser("ppl", help="perplexity of a language model on text")
    p.add_argument("model")
    p.add_argument("text")
    p.add_argument("--normalization", default="lowercase")
    p.set_defaults(func=cmd_ppl)

    p = sub.add_parser("lm-train", help="train a backoff n-gram model")
    p.add_argument("text")
    p.add_argument("vocab")
    p.add_argument("out")
    p.add_argument("--order", type=int, default=3)
    p.add_argument("--backoff", type=float, default=0.4)
    p.add_argument("--normalization", default="lowercase")
    p.set_defaults(func=cmd_lm_train)

    p = sub.add_parser("synth", help="generate a synthetic corpus directory")
    p.add_argument("out")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--utts", type=int, default=20)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--min-words", dest="min_words", type=int, default=2)
    p.add_argument("--max-words", dest="max_words", type=int, default=4)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("bench", help="sweep pruning/compression/beam grids")
    p.add_argument("corpus")
    p.add_argument("--config", default=None)
    p.add_argument("--top-k", dest="top_k", default="none")
    p.add_argument("--compress-threshold", dest="compress_threshold", default="none")
    p.add_argument("--beam", default="8")
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("export-attn", help="write per-head attention matrices")
    p.add_argument("vocab")
    p.add_argument("text")
    p.add_argument("out")
    p.add_argument("--weights", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--interface", default="prefix")
    p.add_argument("--prefix-attention", dest="prefix_attention", default="causal")
    p.add_argument("--prompt", default="")
    p.add_argument("--audio", default=None)
    p.set_defaults(func=cmd_export_attn)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
