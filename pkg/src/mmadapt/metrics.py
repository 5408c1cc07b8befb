"""Evaluation metrics: normalization, WER, smoothed BLEU-4, QA accuracy,
language confusion.

Text normalization applies exactly these rules, in order: lowercase,
delete punctuation characters, collapse whitespace runs, strip. For token
sequences the analog is dropping the caller-provided punctuation-like ids.
Both forms are idempotent.
"""

from __future__ import annotations

import string
import warnings
from dataclasses import dataclass
from math import exp, log

from .corpus import Example
from .errors import ContractViolation, UndefinedWerError
from .vocab import Vocab

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize_text(x, drop_tokens: frozenset[int] | set[int] = frozenset()):
    """Canonical form of a string or a token-id sequence (idempotent)."""
    if isinstance(x, str):
        return " ".join(x.lower().translate(_PUNCT_TABLE).split())
    return tuple(t for t in x if t not in drop_tokens)


def _as_units(x, drop_tokens) -> list:
    norm = normalize_text(x, drop_tokens)
    return norm.split() if isinstance(norm, str) else list(norm)


def wer(reference, hypothesis, drop_tokens: frozenset[int] | set[int] = frozenset()) -> float:
    """Token-level Levenshtein distance over normalized forms, divided by
    the reference length. Substitution, insertion and deletion all cost 1."""
    ref = _as_units(reference, drop_tokens)
    hyp = _as_units(hypothesis, drop_tokens)
    if not ref:
        raise UndefinedWerError("reference is empty after normalization")
    prev = list(range(len(hyp) + 1))
    for i, r in enumerate(ref, start=1):
        cur = [i] + [0] * len(hyp)
        for j, h in enumerate(hyp, start=1):
            cur[j] = min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (r != h))
        prev = cur
    return prev[-1] / len(ref)


def _tokenize(x, tokenizer: str) -> list:
    if isinstance(x, str):
        if tokenizer == "word":
            return x.split()
        if tokenizer == "char":
            return [c for c in x if not c.isspace()]
        raise ContractViolation(f"unknown tokenizer {tokenizer!r}")
    return list(x)


def _ngram_counts(units: list, n: int) -> dict:
    counts: dict = {}
    for i in range(len(units) - n + 1):
        g = tuple(units[i : i + n])
        counts[g] = counts.get(g, 0) + 1
    return counts


def bleu4(references, hypothesis, tokenizer: str = "word", smoothing: str = "exp") -> float:
    """Smoothed BLEU-4 in [0, 100].

    score = BP * exp(mean_n log p_n) * 100 over n = 1..4, where p_n is the
    clipped n-gram precision. Exponential smoothing: the k-th order with a
    zero match count scores 1 / (2^k * total_n). An order with no n-grams at
    all (hypothesis shorter than n) makes the score 0. BP = min(1,
    exp(1 - ref_len / hyp_len)) with the closest reference length.
    """
    if smoothing != "exp":
        raise ContractViolation(f"unknown smoothing {smoothing!r}")
    refs = [_tokenize(r, tokenizer) for r in references]
    if not refs:
        raise ContractViolation("bleu4 needs at least one reference")
    hyp = _tokenize(hypothesis, tokenizer)
    if not hyp:
        warnings.warn("empty hypothesis scores 0 BLEU", stacklevel=2)
        return 0.0
    log_precisions = []
    smooth = 1.0
    for n in range(1, 5):
        hyp_counts = _ngram_counts(hyp, n)
        total = max(len(hyp) - n + 1, 0)
        if total == 0:
            return 0.0
        max_ref: dict = {}
        for ref in refs:
            for g, c in _ngram_counts(ref, n).items():
                max_ref[g] = max(max_ref.get(g, 0), c)
        correct = sum(min(c, max_ref.get(g, 0)) for g, c in hyp_counts.items())
        if correct == 0:
            smooth *= 2.0
            p = 1.0 / (smooth * total)
        else:
            p = correct / total
        log_precisions.append(log(p))
    hyp_len = len(hyp)
    ref_len = min((abs(len(r) - hyp_len), len(r)) for r in refs)[1]
    bp = 1.0 if hyp_len >= ref_len else exp(1.0 - ref_len / hyp_len)
    return bp * exp(sum(log_precisions) / 4.0) * 100.0


def sequence_accuracy(references, hypotheses) -> float:
    """Exact-match fraction over aligned sequence pairs."""
    if len(references) != len(hypotheses):
        raise ContractViolation("reference/hypothesis lists are misaligned")
    if not references:
        return 0.0
    return sum(1 for r, h in zip(references, hypotheses) if tuple(r) == tuple(h)) / len(references)


def make_default_judge(vocab: Vocab):
    """Deterministic QA judge: a valid answer is correct when every
    normalized reference token appears in the normalized output; an invalid
    example is correct only on the exact not-answerable sequence."""
    drop = vocab.normalization_drop_ids

    def judge(example: Example, output_tokens) -> bool:
        out = normalize_text(tuple(output_tokens), drop)
        if example.validity == "invalid":
            return tuple(output_tokens) == tuple(vocab.lang(example.language).not_answerable)
        ref = normalize_text(tuple(example.answer_tokens), drop)
        return bool(ref) and all(t in out for t in ref)

    return judge


def make_text_judge_adapter(verdict_fn, vocab: Vocab):
    """Adapt a text-in/verdict-out callable (an external judge) to the judge
    interface. The callable sees a plain-text blob and answers yes/no."""

    def render(tokens) -> str:
        return " ".join(f"t{t}" for t in tokens)

    def judge(example: Example, output_tokens) -> bool:
        blob = (
            f"question: {render(example.question_tokens or ())}\n"
            f"reference: {render(example.answer_tokens)}\n"
            f"answer: {render(output_tokens)}\n"
            "Is the answer correct? Reply yes or no."
        )
        verdict = str(verdict_fn(blob)).strip().lower()
        return verdict.startswith("y")

    return judge


def qa_accuracy(examples: list[Example], outputs: list, judge) -> float:
    """Fraction of outputs the judge accepts; lists must be aligned."""
    if len(examples) != len(outputs):
        raise ContractViolation("examples and outputs are misaligned")
    if not examples:
        return 0.0
    return sum(1 for ex, out in zip(examples, outputs) if judge(ex, out)) / len(examples)


def language_confusion(outputs: list, expected_language: str, vocab: Vocab) -> float:
    """Fraction of outputs whose majority lexical range is the expected
    language. Empty or tied outputs count as confused."""
    if not outputs:
        raise ContractViolation("no outputs to classify")
    hits = sum(1 for out in outputs if vocab.classify_language(out) == expected_language)
    return hits / len(outputs)


@dataclass(frozen=True)
class MetricRecord:
    task: str
    language: str
    metric: str
    value: float
    n_examples: int
    config_digest: str

    def to_json(self) -> dict:
        return {
            "task": self.task,
            "language": self.language,
            "metric": self.metric,
            "value": self.value,
            "n_examples": self.n_examples,
            "config_digest": self.config_digest,
        }
