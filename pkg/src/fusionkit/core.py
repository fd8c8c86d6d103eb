"""Shared domain types, log-domain arithmetic, and binary file formats.

Scores are natural-log probabilities throughout; matrices live on disk as
row-major little-endian float32 and are widened to float64 in memory.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

NEG_INF = float("-inf")

POSTERIORGRAM_MAGIC = b"FKPG"
ENCODER_OUTPUT_MAGIC = b"FKEO"
FORMAT_VERSION = 1

WORD_MARKER = "▁"  # leading marker on word-initial token strings

_VOCAB_FLAGS = ("blank", "bos", "eos", "word_begin")


class FormatError(ValueError):
    """A file does not conform to its declared binary or text format."""


class ValidationError(ValueError):
    """Structurally well-formed data violates a domain invariant."""


def logsumexp(values: Sequence[float] | np.ndarray) -> float:
    """Stable log(sum(exp(values))); all -inf inputs give -inf."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.size == 0:
        raise ValueError("logsumexp of empty sequence")
    m = np.max(arr)
    if m == NEG_INF:
        return NEG_INF
    return float(m + np.log(np.sum(np.exp(arr - m))))


@dataclass(frozen=True)
class Vocabulary:
    """Token inventory with blank/BOS/EOS ids and word-begin flags.

    Word-initial tokens carry a leading ``WORD_MARKER`` in their string (the
    sentencepiece convention); the ``begins_word`` flag is authoritative for
    word-boundary logic.
    """

    tokens: tuple[str, ...]
    blank_id: int
    bos_id: int
    eos_id: int
    begins_word: tuple[bool, ...]

    def __post_init__(self):
        n = len(self.tokens)
        if len(set(self.tokens)) != n:
            raise ValidationError("duplicate token strings in vocabulary")
        if len(self.begins_word) != n:
            raise ValidationError("begins_word length mismatch")
        for name, idx in (("blank", self.blank_id), ("bos", self.bos_id), ("eos", self.eos_id)):
            if not 0 <= idx < n:
                raise ValidationError(f"{name}_id {idx} out of range for {n} tokens")
        if len({self.blank_id, self.bos_id, self.eos_id}) != 3:
            raise ValidationError("blank/bos/eos ids must be distinct")
        for tok in self.tokens:
            if "\t" in tok or "\n" in tok:
                raise ValidationError(f"token {tok!r} contains tab or newline")

    @property
    def size(self) -> int:
        return len(self.tokens)

    def id_of(self, token: str) -> int:
        return self.tokens.index(token)

    def is_special(self, label: int) -> bool:
        return label in (self.blank_id, self.bos_id, self.eos_id)

    def text(self, labels: Iterable[int]) -> str:
        """Render a label sequence as text, turning word markers into spaces."""
        raw = "".join(self.tokens[i] for i in labels)
        return raw.replace(WORD_MARKER, " ").strip()

    def word_segments(self, labels: Sequence[int]) -> tuple[list[list[int]], list[int]]:
        """Split labels into completed word label groups plus a pending tail.

        A new word starts at every ``begins_word`` token.  The final group is
        pending: later labels may still extend it.
        """
        groups: list[list[int]] = []
        for lab in labels:
            if self.begins_word[lab] or not groups:
                groups.append([lab])
            else:
                groups[-1].append(lab)
        if not groups:
            return [], []
        return groups[:-1], groups[-1]

    def word_text(self, word_labels: Sequence[int]) -> str:
        return "".join(self.tokens[i] for i in word_labels).replace(WORD_MARKER, "")

    @staticmethod
    def from_tokens(
        tokens: Sequence[str],
        blank: str = "<blank>",
        bos: str = "<s>",
        eos: str = "</s>",
    ) -> "Vocabulary":
        """Build a vocabulary from plain token strings.

        Word-begin flags follow the leading-marker convention.
        """
        toks = tuple(tokens)
        flags = tuple(t.startswith(WORD_MARKER) for t in toks)
        return Vocabulary(
            tokens=toks,
            blank_id=toks.index(blank),
            bos_id=toks.index(bos),
            eos_id=toks.index(eos),
            begins_word=flags,
        )


def write_vocabulary(vocab: Vocabulary, path: str | Path) -> None:
    """One token per line: ``<token>\\t<flags>``; line number is the id."""
    lines = []
    for i, tok in enumerate(vocab.tokens):
        flags = []
        if i == vocab.blank_id:
            flags.append("blank")
        if i == vocab.bos_id:
            flags.append("bos")
        if i == vocab.eos_id:
            flags.append("eos")
        if vocab.begins_word[i]:
            flags.append("word_begin")
        lines.append(f"{tok}\t{','.join(flags)}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_vocabulary(path: str | Path) -> Vocabulary:
    tokens: list[str] = []
    begins: list[bool] = []
    blank_id = bos_id = eos_id = None
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if "\t" not in line:
            raise FormatError(f"vocabulary line {lineno}: missing tab separator")
        tok, flag_str = line.split("\t", 1)
        flags = [f for f in flag_str.split(",") if f]
        for f in flags:
            if f not in _VOCAB_FLAGS:
                raise FormatError(f"vocabulary line {lineno}: unknown flag {f!r}")
        tokens.append(tok)
        begins.append("word_begin" in flags)
        if "blank" in flags:
            blank_id = lineno
        if "bos" in flags:
            bos_id = lineno
        if "eos" in flags:
            eos_id = lineno
    if blank_id is None or bos_id is None or eos_id is None:
        raise FormatError("vocabulary file must flag blank, bos, and eos tokens")
    return Vocabulary(tuple(tokens), blank_id, bos_id, eos_id, tuple(begins))


def _check_rows_normalized(log_probs: np.ndarray, tol: float = 1e-6) -> None:
    for t in range(log_probs.shape[0]):
        lse = logsumexp(log_probs[t])
        if not abs(lse) <= tol:
            raise ValidationError(
                f"posteriorgram row {t} is not normalized: log-sum-exp = {lse:.3e}"
            )


@dataclass(frozen=True)
class Posteriorgram:
    """T x V frame-wise natural-log probability matrix.

    Each row must log-sum-exp to 0 within 1e-6.  frame_duration_ms makes
    real-time factors self-describing (default 60: 10ms features, factor 6).
    """

    log_probs: np.ndarray
    frame_duration_ms: float = 60.0

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=np.float64)
        object.__setattr__(self, "log_probs", lp)
        if lp.ndim != 2 or lp.shape[0] < 1:
            raise ValidationError("posteriorgram must be a T x V matrix with T >= 1")
        if self.frame_duration_ms <= 0:
            raise ValidationError("frame_duration_ms must be positive")
        _check_rows_normalized(lp)
        lp.setflags(write=False)

    @property
    def num_frames(self) -> int:
        return self.log_probs.shape[0]

    @property
    def num_labels(self) -> int:
        return self.log_probs.shape[1]

    @property
    def duration_seconds(self) -> float:
        return self.num_frames * self.frame_duration_ms / 1000.0


def write_posteriorgram(pg: Posteriorgram, path: str | Path) -> None:
    t, v = pg.log_probs.shape
    dur_us = int(round(pg.frame_duration_ms * 1000.0))
    with open(path, "wb") as f:
        f.write(POSTERIORGRAM_MAGIC)
        f.write(struct.pack("<IIII", FORMAT_VERSION, t, v, dur_us))
        f.write(pg.log_probs.astype("<f4").tobytes(order="C"))


def read_posteriorgram(path: str | Path) -> Posteriorgram:
    data = Path(path).read_bytes()
    if data[:4] != POSTERIORGRAM_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {POSTERIORGRAM_MAGIC!r}")
    if len(data) < 20:
        raise FormatError(f"{path}: truncated header")
    version, t, v, dur_us = struct.unpack("<IIII", data[4:20])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    payload = data[20:]
    expected = t * v * 4
    if len(payload) != expected:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {expected}")
    mat = np.frombuffer(payload, dtype="<f4").reshape(t, v)
    return Posteriorgram(log_probs=mat.astype(np.float64), frame_duration_ms=dur_us / 1000.0)


@dataclass(frozen=True)
class EncoderOutput:
    """T x D matrix of real-valued encoder frames."""

    frames: np.ndarray

    def __post_init__(self):
        fr = np.asarray(self.frames, dtype=np.float64)
        object.__setattr__(self, "frames", fr)
        if fr.ndim != 2 or fr.shape[0] < 1 or fr.shape[1] < 1:
            raise ValidationError("encoder output must be a T x D matrix with T, D >= 1")
        fr.setflags(write=False)

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]


def write_encoder_output(enc: EncoderOutput, path: str | Path) -> None:
    t, d = enc.frames.shape
    with open(path, "wb") as f:
        f.write(ENCODER_OUTPUT_MAGIC)
        f.write(struct.pack("<III", FORMAT_VERSION, t, d))
        f.write(enc.frames.astype("<f4").tobytes(order="C"))


def read_encoder_output(path: str | Path) -> EncoderOutput:
    data = Path(path).read_bytes()
    if data[:4] != ENCODER_OUTPUT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}, expected {ENCODER_OUTPUT_MAGIC!r}")
    if len(data) < 16:
        raise FormatError(f"{path}: truncated header")
    version, t, d = struct.unpack("<III", data[4:16])
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported format version {version}")
    payload = data[16:]
    if len(payload) != t * d * 4:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {t * d * 4}")
    mat = np.frombuffer(payload, dtype="<f4").reshape(t, d)
    return EncoderOutput(frames=mat.astype(np.float64))


@dataclass
class ScorerWeights:
    """Log-linear combination weights plus length handling for beam search."""

    weights: dict[str, float]
    length_norm: bool = False
    max_len_factor: float = 1.0

    def __post_init__(self):
        if not any(w != 0.0 for w in self.weights.values()):
            raise ValidationError("at least one scorer weight must be nonzero")
        if self.max_len_factor <= 0:
            raise ValidationError("max_len_factor must be positive")

    def combine(self, components: dict[str, float]) -> float:
        # zero-weight scorers are inert even when their component is -inf
        total = 0.0
        for name, v in components.items():
            w = self.weights.get(name, 0.0)
            if w != 0.0:
                total += w * v
        return total


@dataclass
class Hypothesis:
    """Partial label sequence with per-scorer accumulated log-scores."""

    labels: tuple[int, ...] = ()
    score_components: dict[str, float] = field(default_factory=dict)
    combined_score: float = 0.0
    finished: bool = False

    def check(self, weights: ScorerWeights, eos_id: int | None = None) -> None:
        expected = weights.combine(self.score_components)
        if math.isfinite(expected) and abs(self.combined_score - expected) > 1e-9:
            raise ValidationError(
                f"combined score {self.combined_score} != weighted components {expected}"
            )
        if self.finished and eos_id is not None:
            if not self.labels or self.labels[-1] != eos_id:
                raise ValidationError("finished hypothesis must end in EOS")
