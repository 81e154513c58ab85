"""Sample-diversity metrics: coefficient of variation over morphology
parameters and Self-BLEU over reward sources. Lower Self-BLEU means a more
diverse corpus; higher CV means a wider morphology spread."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Optional

from .errors import CodesignError, MissingParameter
from .model import MorphologySchema

# Parameters whose mean magnitude falls below this are reported as undefined
# instead of producing exploding CVs.
DEGENERATE_MEAN = 1e-9

BLEU_EPSILON = 1e-9
BLEU_MAX_ORDER = 4


class TooFewSamples(CodesignError):
    pass


class AllParamsDegenerate(CodesignError):
    pass


class EmptyDocument(CodesignError):
    pass


@dataclass(frozen=True)
class DiversityReport:
    per_param_cv: dict[str, Optional[float]]
    aggregate_cv: float
    self_bleu: Optional[float]
    sample_count: int


def coefficient_of_variation(
    samples: list[dict[str, float]], schema: MorphologySchema
) -> tuple[dict[str, Optional[float]], float]:
    """Per-parameter population CV (sigma/|mu|) and the mean of the defined ones.

    Parameters with |mu| below DEGENERATE_MEAN map to None and are excluded
    from the aggregate.
    """
    if len(samples) < 2:
        raise TooFewSamples(f"need >= 2 samples, got {len(samples)}")
    for s in samples:
        missing = [n for n in schema.param_names if n not in s]
        if missing:
            raise MissingParameter(missing)
    n = len(samples)
    per_param: dict[str, Optional[float]] = {}
    defined: list[float] = []
    for name in schema.param_names:
        xs = [float(s[name]) for s in samples]
        mean = math.fsum(xs) / n
        var = math.fsum((x - mean) ** 2 for x in xs) / n
        if abs(mean) < DEGENERATE_MEAN:
            per_param[name] = None
            continue
        cv = math.sqrt(var) / abs(mean)
        per_param[name] = cv
        defined.append(cv)
    if not defined:
        raise AllParamsDegenerate("no parameter has a usable mean")
    return per_param, math.fsum(defined) / len(defined)


_CODE_TOKEN = re.compile(
    r"(?P<name>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<punct>\S)"
)


def tokenize_code(source: str) -> list[str]:
    """Split source into identifiers, numeric literals and single
    punctuation characters; comment lines (``#`` prefix) are dropped."""
    tokens: list[str] = []
    for line in source.splitlines():
        if line.lstrip().startswith("#"):
            continue
        for m in _CODE_TOKEN.finditer(line):
            tokens.append(m.group(m.lastgroup))
    return tokens


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def _bleu(candidate: list[str], references: list[list[str]]) -> float:
    """Sentence BLEU-4 with uniform weights, standard brevity penalty and
    epsilon smoothing of zero match counts."""
    log_sum = 0.0
    for n in range(1, BLEU_MAX_ORDER + 1):
        total = max(len(candidate) - n + 1, 0)
        if total == 0:
            # candidate too short for this order: nothing to match
            log_sum += math.log(BLEU_EPSILON)
            continue
        cand_counts = _ngrams(candidate, n)
        matched = 0
        for gram, count in cand_counts.items():
            best = max(_ngrams(ref, n).get(gram, 0) for ref in references)
            matched += min(count, best)
        numerator = matched if matched > 0 else BLEU_EPSILON
        log_sum += math.log(numerator / total)
    c = len(candidate)
    ref_lens = [len(r) for r in references]
    r = min(ref_lens, key=lambda length: (abs(length - c), length))
    bp = 1.0 if c > r else math.exp(1.0 - r / c)
    return bp * math.exp(log_sum / BLEU_MAX_ORDER)


def self_bleu(corpus: list[str]) -> float:
    """Mean BLEU of each document against the rest of the corpus."""
    if len(corpus) < 2:
        raise TooFewSamples(f"need >= 2 documents, got {len(corpus)}")
    token_docs = [tokenize_code(doc) for doc in corpus]
    for i, toks in enumerate(token_docs):
        if not toks:
            raise EmptyDocument(f"document {i} tokenizes to nothing")
    scores = []
    for i, cand in enumerate(token_docs):
        references = token_docs[:i] + token_docs[i + 1 :]
        scores.append(_bleu(cand, references))
    return math.fsum(scores) / len(scores)


def report(
    morphology_samples: list[dict[str, float]],
    reward_sources: list[str],
    schema: MorphologySchema,
) -> DiversityReport:
    """Bundle both metrics for one generation batch."""
    per_param, aggregate = coefficient_of_variation(morphology_samples, schema)
    bleu = self_bleu(reward_sources) if len(reward_sources) >= 2 else None
    return DiversityReport(
        per_param_cv=per_param,
        aggregate_cv=aggregate,
        self_bleu=bleu,
        sample_count=len(morphology_samples),
    )
