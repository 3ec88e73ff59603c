"""Synthetic span-extraction task: dataset generation, decoding, scoring.

Each example packs a CLS-like token, a query k-gram, a separator, and a
context into one fixed-length id sequence. Answerable examples contain the
query k-gram exactly once in the context; the gold span points at it.
A gold span of (0, 0) marks an unanswerable example.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

CLS_ID = 0
SEP_ID = 1
FIRST_WORD_ID = 2  # ids below this are reserved


@dataclass
class SpanExample:
    tokens: np.ndarray      # int ids, length L, position 0 is CLS
    segments: np.ndarray    # 0 on the query side, 1 on the context side
    gold_span: tuple        # (start, end) inclusive; (0, 0) = unanswerable

    @property
    def attention_mask(self):
        return np.ones(len(self.tokens))


@dataclass
class SpanPrediction:
    span: tuple
    start_logits: np.ndarray
    end_logits: np.ndarray


class GenerationError(RuntimeError):
    """Rejection sampling could not satisfy the occurrence constraints."""


def _count_occurrences(haystack, needle):
    n, k = len(haystack), len(needle)
    return sum(
        1 for i in range(n - k + 1) if np.array_equal(haystack[i:i + k], needle)
    )


def generate_dataset(seed, count, seq_len, vocab_size, needle_len_range=(1, 2),
                     unanswerable_fraction=0.0, max_tries=1000):
    """Deterministic synthetic dataset of ``count`` examples of length seq_len.

    Layout: [CLS] query [SEP] context, padded nowhere (context fills the
    remainder). The query is a random k-gram with k drawn from
    ``needle_len_range`` (inclusive). Queries draw from the upper half of the
    word-id range and contexts from the lower half, which keeps the
    exactly-one-occurrence constraint cheap to satisfy and the task learnable
    at desk scale; occurrence counts are verified by scan regardless.
    """
    if not 0.0 <= unanswerable_fraction <= 1.0:
        raise ValueError("unanswerable_fraction must lie in [0, 1]")
    lo, hi = needle_len_range
    if lo < 1 or hi < lo:
        raise ValueError(f"bad needle_len_range {needle_len_range}")
    split = FIRST_WORD_ID + (vocab_size - FIRST_WORD_ID) // 2
    if split <= FIRST_WORD_ID or split >= vocab_size:
        raise ValueError(f"vocab_size {vocab_size} leaves too few word ids")
    context_start = 2 + hi  # CLS + longest query + SEP
    if context_start + 1 >= seq_len:
        raise ValueError("seq_len too small for the requested needle lengths")

    rng = np.random.default_rng(seed)
    examples = []
    for _ in range(count):
        k = int(rng.integers(lo, hi + 1))
        needle = rng.integers(split, vocab_size, size=k)
        start = 1 + k + 1  # CLS + query + SEP
        ctx_len = seq_len - start
        unanswerable = rng.random() < unanswerable_fraction
        for attempt in range(max_tries):
            context = rng.integers(FIRST_WORD_ID, split, size=ctx_len)
            if unanswerable:
                if _count_occurrences(context, needle) == 0:
                    gold = (0, 0)
                    break
            else:
                pos = int(rng.integers(0, ctx_len - k + 1))
                context[pos:pos + k] = needle
                if _count_occurrences(context, needle) == 1:
                    gold = (start + pos, start + pos + k - 1)
                    break
        else:
            raise GenerationError(
                f"could not satisfy occurrence constraint in {max_tries} tries; "
                f"vocab_size {vocab_size} may be too small"
            )
        tokens = np.concatenate(([CLS_ID], needle, [SEP_ID], context))
        segments = np.concatenate((np.zeros(start, dtype=np.int64),
                                   np.ones(ctx_len, dtype=np.int64)))
        examples.append(SpanExample(tokens.astype(np.int64), segments, gold))
    return examples


def decode_span(start_logits, end_logits, max_answer_len=30):
    """Best (start, end) pair under the joint argmax with a null comparison.

    Valid pairs satisfy 1 <= s <= e < L and e - s < max_answer_len; the null
    score is start[0] + end[0] and wins ties. Among spans, ties break toward
    the earlier start, then the shorter span.
    """
    start_logits = np.asarray(start_logits, dtype=np.float64)
    end_logits = np.asarray(end_logits, dtype=np.float64)
    L = start_logits.shape[0]
    null_score = start_logits[0] + end_logits[0]
    scores = start_logits[:, None] + end_logits[None, :]
    s_idx, e_idx = np.indices((L, L))
    valid = (s_idx >= 1) & (e_idx >= s_idx) & (e_idx - s_idx < max_answer_len)
    if not valid.any():
        return SpanPrediction((0, 0), start_logits, end_logits)
    scores = np.where(valid, scores, -np.inf)
    flat = int(scores.argmax())  # row-major: earliest start, then shortest span
    best = (flat // L, flat % L)
    span = (0, 0) if null_score >= scores[best] else best
    return SpanPrediction(span, start_logits, end_logits)


def _example_scores(pred_span, gold_span):
    em = 1.0 if pred_span == gold_span else 0.0
    if gold_span == (0, 0):
        return em, 1.0 if pred_span == (0, 0) else 0.0
    if pred_span == (0, 0):
        return em, 0.0
    ps, pe = pred_span
    gs, ge = gold_span
    overlap = max(0, min(pe, ge) - max(ps, gs) + 1)
    if overlap == 0:
        return em, 0.0
    precision = overlap / (pe - ps + 1)
    recall = overlap / (ge - gs + 1)
    return em, 2.0 * precision * recall / (precision + recall)


def score(predictions, golds):
    """Mean exact-match and token-overlap F1, as percentages."""
    if len(predictions) != len(golds):
        raise ValueError("predictions and golds differ in length")
    if not predictions:
        return 0.0, 0.0
    pairs = [
        _example_scores(p.span if isinstance(p, SpanPrediction) else tuple(p),
                        g.gold_span if isinstance(g, SpanExample) else tuple(g))
        for p, g in zip(predictions, golds)
    ]
    em = 100.0 * sum(p[0] for p in pairs) / len(pairs)
    f1 = 100.0 * sum(p[1] for p in pairs) / len(pairs)
    return em, f1


def save_dataset(examples, path):
    """One example per line: token ids | segment ids | gold start gold end."""
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            toks = " ".join(str(t) for t in ex.tokens)
            segs = " ".join(str(s) for s in ex.segments)
            fh.write(f"{toks}|{segs}|{ex.gold_span[0]} {ex.gold_span[1]}\n")


def load_dataset(path):
    examples = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            toks_s, segs_s, gold_s = line.split("|")
            tokens = np.array([int(t) for t in toks_s.split()], dtype=np.int64)
            segments = np.array([int(s) for s in segs_s.split()], dtype=np.int64)
            gs, ge = (int(v) for v in gold_s.split())
            examples.append(SpanExample(tokens, segments, (gs, ge)))
    return examples
