"""CTC probabilities, collapsing, prefix scoring, compression, and pruning.

All functions are pure over immutable inputs.  Argmax ties break toward the
lowest label id so every result is reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from fusionkit.core import NEG_INF, EncoderOutput, Posteriorgram, logsumexp


def collapse(frame_labels: Sequence[int], blank_id: int) -> list[int]:
    """Merge adjacent duplicate labels, then remove blanks."""
    out: list[int] = []
    prev = None
    for lab in frame_labels:
        if lab != prev:
            out.append(lab)
        prev = lab
    return [lab for lab in out if lab != blank_id]


def greedy_decode(pg: Posteriorgram, blank_id: int) -> list[int]:
    """Collapse the per-frame argmax path (ties go to the lowest id)."""
    best = np.argmax(pg.log_probs, axis=1)
    return collapse(best.tolist(), blank_id)


def ctc_forward_logprob(pg: Posteriorgram, target: Sequence[int], blank_id: int) -> float:
    """Log probability that the collapsed frame labels equal ``target``.

    Sums over every alignment path; infeasible targets give -inf.
    """
    target = list(target)
    if blank_id in target:
        raise ValueError("target must not contain the blank label")
    lp = pg.log_probs
    T = lp.shape[0]
    S = len(target)
    if S == 0:
        return float(np.sum(lp[:, blank_id]))

    # interleave blanks: extended target of length 2S+1
    ext = np.empty(2 * S + 1, dtype=np.int64)
    ext[0::2] = blank_id
    ext[1::2] = target
    n = ext.size

    alpha = np.full(n, NEG_INF)
    alpha[0] = lp[0, ext[0]]
    alpha[1] = lp[0, ext[1]]
    for t in range(1, T):
        prev = alpha
        stay = prev
        from_prev = np.concatenate(([NEG_INF], prev[:-1]))
        # skip transition is allowed into a non-blank that differs from the
        # non-blank two positions back
        from_skip = np.full(n, NEG_INF)
        can_skip = np.zeros(n, dtype=bool)
        can_skip[3::2] = ext[3::2] != ext[1:-2:2]
        from_skip[can_skip] = prev[:-2][can_skip[2:]]
        alpha = np.logaddexp(np.logaddexp(stay, from_prev), from_skip) + lp[t, ext]
    return float(np.logaddexp(alpha[-1], alpha[-2]))


@dataclass(frozen=True)
class MergeIndexMap:
    """Frame-to-group assignment for confident-argmax run merging."""

    indices: tuple[int, ...]
    threshold: float

    def __post_init__(self):
        idx = self.indices
        if not idx or idx[0] != 1:
            raise ValueError("merge indices must start at 1")
        for a, b in zip(idx, idx[1:]):
            if b - a not in (0, 1):
                raise ValueError("merge indices must be nondecreasing with unit steps")

    @property
    def num_groups(self) -> int:
        return self.indices[-1]

    @property
    def is_identity(self) -> bool:
        return self.num_groups == len(self.indices)


def merge_indices(pg: Posteriorgram, threshold: float) -> MergeIndexMap:
    """Assign consecutive frames to one group when they share a confident argmax.

    Two neighbours merge iff their argmax labels agree and both argmax
    probabilities reach the threshold.
    """
    if threshold <= 0:
        raise ValueError("threshold must be positive")
    lp = pg.log_probs
    best = np.argmax(lp, axis=1)
    best_prob = np.exp(lp[np.arange(lp.shape[0]), best])
    indices = [1]
    for t in range(1, lp.shape[0]):
        merge = (
            best[t] == best[t - 1]
            and best_prob[t] >= threshold
            and best_prob[t - 1] >= threshold
        )
        indices.append(indices[-1] if merge else indices[-1] + 1)
    return MergeIndexMap(tuple(indices), threshold)


def compress_encoder(enc: EncoderOutput, index_map: MergeIndexMap) -> EncoderOutput:
    """Mean-pool encoder frames that share a merge group."""
    if len(index_map.indices) != enc.num_frames:
        raise ValueError(
            f"merge map covers {len(index_map.indices)} frames, encoder has {enc.num_frames}"
        )
    if index_map.is_identity:
        return enc
    idx = np.asarray(index_map.indices) - 1
    out = np.zeros((index_map.num_groups, enc.dim))
    counts = np.bincount(idx, minlength=index_map.num_groups)
    np.add.at(out, idx, enc.frames)
    return EncoderOutput(out / counts[:, None])


def compress_posteriors(pg: Posteriorgram, index_map: MergeIndexMap) -> Posteriorgram:
    """Max-pool label probabilities over each merge group, then renormalize."""
    if len(index_map.indices) != pg.num_frames:
        raise ValueError(
            f"merge map covers {len(index_map.indices)} frames, posteriorgram has {pg.num_frames}"
        )
    if index_map.is_identity:
        return pg
    idx = np.asarray(index_map.indices) - 1
    pooled = np.full((index_map.num_groups, pg.num_labels), NEG_INF)
    np.maximum.at(pooled, idx, pg.log_probs)
    norms = np.array([logsumexp(row) for row in pooled])
    return Posteriorgram(pooled - norms[:, None], pg.frame_duration_ms)


def topk_prune(pg: Posteriorgram, k: int, keep_blank: bool, blank_id: int) -> Posteriorgram:
    """Keep the k labels with the highest max-over-time probability.

    Dropped labels get zero probability everywhere and rows are renormalized.
    With keep_blank the blank label always survives, counted within k.
    k = V is an exact no-op.  A frame whose entire mass sat on pruned labels
    becomes a pure blank frame (a pruned label's frames carry no output).
    """
    v = pg.num_labels
    if not 1 <= k <= v:
        raise ValueError(f"k must be in [1, {v}], got {k}")
    if k == v:
        return pg
    s_max = np.max(pg.log_probs, axis=0)
    # sort by (-score, id) so ties go to the lower id
    order = np.lexsort((np.arange(v), -s_max))
    kept = set(order[:k].tolist())
    if keep_blank and blank_id not in kept:
        kept.discard(int(order[k - 1]))
        kept.add(blank_id)
    mask = np.zeros(v, dtype=bool)
    mask[list(kept)] = True
    pruned = np.where(mask, pg.log_probs, NEG_INF)
    norms = np.array([logsumexp(row) for row in pruned])
    empty = norms == NEG_INF
    if np.any(empty):
        pruned[empty] = NEG_INF
        pruned[empty, blank_id] = 0.0
        norms[empty] = 0.0
    return Posteriorgram(pruned - norms[:, None], pg.frame_duration_ms)


def kept_labels(pg: Posteriorgram) -> np.ndarray:
    """Labels with nonzero probability in at least one frame."""
    return np.flatnonzero(np.max(pg.log_probs, axis=0) > NEG_INF)


@dataclass(frozen=True)
class PrefixScorerState:
    """Forward variables of one hypothesis prefix over all frames.

    ``log_nonblank[t]`` / ``log_blank[t]`` are the log probabilities that
    frames 1..t+1 collapse exactly to the prefix with the path ending in the
    prefix's last label / in blank.  ``log_prefix_prob`` is the log
    probability that the full collapsed output starts with the prefix.
    """

    prefix: tuple[int, ...]
    log_nonblank: np.ndarray
    log_blank: np.ndarray
    log_prefix_prob: float

    def check(self) -> None:
        total = np.exp(self.log_nonblank) + np.exp(self.log_blank)
        if np.any(total > 1.0 + 1e-6):
            raise ValueError("forward variables exceed probability 1")


class CtcPrefixScorer:
    """Incremental prefix probabilities of the CTC output distribution.

    For a prefix g and candidate c the step score is the log probability
    that the collapsed output begins with g.c; the EOS candidate scores the
    probability that the output equals g exactly.
    """

    def __init__(self, pg: Posteriorgram, blank_id: int, eos_id: int):
        self.pg = pg
        self.log_probs = pg.log_probs
        self.blank_id = blank_id
        self.eos_id = eos_id
        self.num_frames = pg.num_frames

    def initial_state(self) -> PrefixScorerState:
        blanks = np.cumsum(self.log_probs[:, self.blank_id])
        return PrefixScorerState(
            prefix=(),
            log_nonblank=np.full(self.num_frames, NEG_INF),
            log_blank=blanks,
            log_prefix_prob=0.0,
        )

    def step(
        self, state: PrefixScorerState, candidates: Sequence[int]
    ) -> tuple[np.ndarray, list[PrefixScorerState]]:
        """Score every candidate extension of the state's prefix.

        Returns the absolute log prefix probabilities and, aligned with
        them, the successor state per candidate (EOS candidates reuse the
        parent state since they terminate the hypothesis).
        """
        cands = np.asarray(candidates, dtype=np.int64)
        if np.any(cands == self.blank_id):
            raise ValueError("blank cannot be a prefix-scorer candidate")
        T = self.num_frames
        S = len(state.prefix)
        C = cands.size
        scores = np.full(C, NEG_INF)
        r_n = np.full((T, C), NEG_INF)
        r_b = np.full((T, C), NEG_INF)

        nonterm = cands != self.eos_id
        if S < T and np.any(nonterm):
            # EOS may lie outside the posteriorgram columns; gather a dummy
            # column for it, the scores are overwritten below
            xs = self.log_probs[:, np.where(nonterm, cands, self.blank_id)]
            xs[:, ~nonterm] = NEG_INF
            # phi[t, c]: prob of prefix over frames 1..t+1 such that a new
            # label c may start at frame t+2
            r_sum = np.logaddexp(state.log_nonblank, state.log_blank)
            phi = np.repeat(r_sum[:, None], C, axis=1)
            if S > 0:
                same = cands == state.prefix[-1]
                phi[:, same] = state.log_blank[:, None]
            start = max(S, 1)
            if S == 0:
                r_n[0] = xs[0]
            log_psi = r_n[start - 1].copy()
            for t in range(start, T):
                r_n[t] = np.logaddexp(r_n[t - 1], phi[t - 1]) + xs[t]
                r_b[t] = np.logaddexp(r_n[t - 1], r_b[t - 1]) + self.log_probs[t, self.blank_id]
                log_psi = np.logaddexp(log_psi, phi[t - 1] + xs[t])
            scores[nonterm] = log_psi[nonterm]

        eos_mask = ~nonterm
        if np.any(eos_mask):
            full = np.logaddexp(state.log_nonblank[T - 1], state.log_blank[T - 1])
            scores[eos_mask] = full

        states = [
            state
            if cands[i] == self.eos_id
            else PrefixScorerState(
                prefix=state.prefix + (int(cands[i]),),
                log_nonblank=r_n[:, i].copy(),
                log_blank=r_b[:, i].copy(),
                log_prefix_prob=float(scores[i]),
            )
            for i in range(C)
        ]
        return scores, states


def prefix_score_init(pg: Posteriorgram, blank_id: int) -> PrefixScorerState:
    """State of the empty prefix (prefix probability 1)."""
    return CtcPrefixScorer(pg, blank_id, eos_id=-1).initial_state()


def prefix_score_step(
    pg: Posteriorgram,
    state: PrefixScorerState,
    prefix: Sequence[int],
    candidates: Sequence[int],
    blank_id: int,
    eos_id: int,
) -> tuple[np.ndarray, list[PrefixScorerState]]:
    """Functional wrapper around :class:`CtcPrefixScorer.step`."""
    if tuple(prefix) != state.prefix:
        raise ValueError("state does not belong to the given prefix")
    scorer = CtcPrefixScorer(pg, blank_id, eos_id)
    return scorer.step(state, candidates)
