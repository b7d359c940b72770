"""Evaluation metrics: BLEU, perplexity, distinct-n and keyword metrics.

Ratios that would be 0/0 are reported as ``None`` rather than 0 or 1.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import asdict, dataclass
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .corpus import DialogueSample
from .kg import KnowledgeGraph
from .model import ModelParams, generate, teacher_forced, total_nll

BLEU_EPS = 1e-9


def _ngrams(tokens: Sequence, n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def _ratio(num: float, den: float) -> Optional[float]:
    return None if den == 0 else num / den


def bleu(candidates: Sequence[Sequence[str]], references: Sequence[Sequence[str]], max_n: int = 4) -> float:
    """Corpus-level BLEU with uniform weights and a brevity penalty.

    An order with no clipped matches contributes ``1e-9`` in place of a zero
    count (an order with no candidate n-grams at all uses a denominator of 1).
    """
    if not candidates:
        raise ValueError("bleu needs at least one candidate")
    if len(candidates) != len(references):
        raise ValueError(f"{len(candidates)} candidates vs {len(references)} references")
    matches = [0] * max_n
    totals = [0] * max_n
    cand_len = ref_len = 0
    for cand, ref in zip(candidates, references):
        if not ref:
            raise ValueError("empty reference")
        cand_len += len(cand)
        ref_len += len(ref)
        for n in range(1, max_n + 1):
            c, r = _ngrams(cand, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(k, r[g]) for g, k in c.items())
            totals[n - 1] += sum(c.values())
    if cand_len == 0:
        return 0.0
    log_p = sum(math.log((m or BLEU_EPS) / (t or 1)) for m, t in zip(matches, totals)) / max_n
    bp = 1.0 if cand_len > ref_len else math.exp(1.0 - ref_len / cand_len)
    return bp * math.exp(log_p)


def perplexity_from(total: float, n_tokens: int) -> float:
    if n_tokens <= 0:
        raise ValueError("perplexity needs at least one token")
    return math.exp(total / n_tokens)


def perplexity(params: ModelParams, samples: Sequence[DialogueSample], graph) -> float:
    """exp(summed teacher-forced NLL / target token count); targets include EOS."""
    if not samples:
        raise ValueError("perplexity needs at least one sample")
    return perplexity_from(*total_nll(params, samples, graph))


def distinct_n(candidates: Iterable[Sequence[str]], n: int) -> Optional[float]:
    """Unique n-grams over total n-grams across all candidates."""
    if n < 1:
        raise ValueError("n must be >= 1")
    seen: set = set()
    total = 0
    for cand in candidates:
        grams = [tuple(cand[i:i + n]) for i in range(len(cand) - n + 1)]
        seen.update(grams)
        total += len(grams)
    return _ratio(len(seen), total)


@dataclass(frozen=True)
class KeywordScores:
    kw_acc: Optional[float]
    kw_generic_precision: Optional[float]
    kw_generic_recall: Optional[float]


def position_keyword_scores(pairs: Iterable[tuple[Sequence[int], Sequence[int]]], is_entity) -> KeywordScores:
    """Position-wise keyword scores from (reference ids, argmax ids) pairs.

    KW-Acc counts exact matches among positions whose reference is an entity;
    KW/Generic is precision/recall of the binary entity class. Both are pooled
    over all positions of all samples.
    """
    ref_ent = exact = pred_ent = both_ent = 0
    for targets, preds in pairs:
        for y, p in zip(targets, preds):
            ye, pe = is_entity(int(y)), is_entity(int(p))
            ref_ent += ye
            pred_ent += pe
            both_ent += ye and pe
            exact += ye and int(y) == int(p)
    return KeywordScores(_ratio(exact, ref_ent), _ratio(both_ent, pred_ent), _ratio(both_ent, ref_ent))


def generated_keyword_scores(generated: Iterable[set], references: Iterable[set]) -> tuple[Optional[float], Optional[float]]:
    """Macro-averaged set precision/recall of emitted vs reference entities.

    Samples where a ratio is undefined (nothing emitted / nothing to recall)
    are left out of that ratio's average.
    """
    precisions, recalls = [], []
    for gen, ref in zip(generated, references):
        hit = len(gen & ref)
        if gen:
            precisions.append(hit / len(gen))
        if ref:
            recalls.append(hit / len(ref))
    mean = lambda xs: float(np.mean(xs)) if xs else None  # noqa: E731
    return mean(precisions), mean(recalls)


def _graph_for(graph, sample: DialogueSample) -> KnowledgeGraph:
    return graph if isinstance(graph, KnowledgeGraph) else graph[sample.graph_id]


def generate_all(params: ModelParams, samples: Sequence[DialogueSample], graph, max_len: int = 20) -> list[list[str]]:
    return [generate(s.context, params, _graph_for(graph, s), max_len) for s in samples]


def generated_kw_recall(params: ModelParams, samples: Sequence[DialogueSample], graph,
                        max_len: int = 20) -> Optional[float]:
    ents = set(params.vocab.entities)
    gen = [set(toks) & ents for toks in generate_all(params, samples, graph, max_len)]
    return generated_keyword_scores(gen, [set(s.response) & ents for s in samples])[1]


@dataclass(frozen=True)
class MetricsReport:
    bleu: Optional[float] = None
    ppl: Optional[float] = None
    distinct_1: Optional[float] = None
    distinct_2: Optional[float] = None
    distinct_3: Optional[float] = None
    distinct_4: Optional[float] = None
    kw_acc: Optional[float] = None
    kw_generic_precision: Optional[float] = None
    kw_generic_recall: Optional[float] = None
    generated_kw_precision: Optional[float] = None
    generated_kw_recall: Optional[float] = None
    n_samples: int = 0

    def to_json(self) -> dict:
        return asdict(self)

    def table(self) -> str:
        """Aligned two-row text table, one column per metric."""
        cols = [
            ("KW-Acc", self.kw_acc), ("KW/Gen-P", self.kw_generic_precision),
            ("KW/Gen-R", self.kw_generic_recall), ("GenKW-P", self.generated_kw_precision),
            ("GenKW-R", self.generated_kw_recall), ("BLEU", self.bleu), ("PPL", self.ppl),
            ("Dist1", self.distinct_1), ("Dist2", self.distinct_2),
            ("Dist3", self.distinct_3), ("Dist4", self.distinct_4),
        ]
        cells = [(name, "-" if v is None else f"{v:.4f}") for name, v in cols]
        widths = [max(len(a), len(b)) for a, b in cells]
        head = "  ".join(a.rjust(w) for (a, _), w in zip(cells, widths))
        row = "  ".join(b.rjust(w) for (_, b), w in zip(cells, widths))
        return f"{head}\n{row}\n"


def evaluate(params: ModelParams, samples: Sequence[DialogueSample], graph, max_len: int = 20) -> MetricsReport:
    if not samples:
        raise ValueError("evaluate needs at least one sample")
    vocab = params.vocab
    tf = teacher_forced(params, samples, graph)
    kw = position_keyword_scores(((r.targets, r.predictions) for r in tf), vocab.is_entity)
    total = sum(r.nll for r in tf)
    n_tokens = sum(len(r.targets) for r in tf)
    outputs = generate_all(params, samples, graph, max_len)
    ents = set(vocab.entities)
    gen_p, gen_r = generated_keyword_scores(
        [set(o) & ents for o in outputs], [set(s.response) & ents for s in samples])
    return MetricsReport(
        bleu=bleu(outputs, [list(s.response) for s in samples]),
        ppl=perplexity_from(total, n_tokens),
        distinct_1=distinct_n(outputs, 1),
        distinct_2=distinct_n(outputs, 2),
        distinct_3=distinct_n(outputs, 3),
        distinct_4=distinct_n(outputs, 4),
        kw_acc=kw.kw_acc,
        kw_generic_precision=kw.kw_generic_precision,
        kw_generic_recall=kw.kw_generic_recall,
        generated_kw_precision=gen_p,
        generated_kw_recall=gen_r,
        n_samples=len(samples),
    )


def as_mapping(graph) -> Mapping[str, KnowledgeGraph]:
    return {graph.graph_id: graph} if isinstance(graph, KnowledgeGraph) else dict(graph)
