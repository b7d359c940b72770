"""Adversarial meta-learning over graph-mutation episodes, plus plain training.

An episode is one graph regime: a single triple of the base graph is mutated
(tail or relation swapped) and the dialogues that reference it are rewritten
into adversarial versions.  Parameters adapted on clean support data are scored
on adversarial queries and vice versa; both meta-gradients are first-order
(taken at the adapted parameters) and applied with Adam.

In ``adml-improved`` mode the episodes of a meta-batch are processed in
sequence and each starts from the support-adapted parameters of the previous
one; the meta-update is applied to the last of these rather than to the
incoming parameters.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, fields
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .corpus import ADVERSARIAL, DialogueSample, Split
from .kg import MUTATION_KINDS, GraphMutation, KnowledgeGraph, mutate, mutation_candidates
from .model import ModelParams, loss_and_grad, total_nll
from .tensor import AdamState, adam_update

log = logging.getLogger(__name__)

PLAIN, ADML, IMPROVED = "plain", "adml", "adml-improved"
MODES = (PLAIN, ADML, IMPROVED)

Objective = Callable[[ModelParams, Sequence, object], tuple]


class EpisodeError(ValueError):
    """Not enough samples reference any mutable triple."""


@dataclass
class TrainConfig:
    alpha1: float = 1e-3
    alpha2: float = 1e-3
    beta1: float = 1e-3
    beta2: float = 1e-3
    lr: float = 1e-3
    inner_steps: int = 1
    num_task: int = 4
    support_size: int = 3
    query_size: int = 4
    epochs: int = 10
    batch_size: int = 16
    steps_per_epoch: int | None = None
    n_buckets: int = 4
    patience: int = 3
    mode: str = IMPROVED
    pairing: str = "cross"
    adversarial: bool = True
    mutation_kinds: tuple = MUTATION_KINDS
    mutations_per_episode: int = 1
    seed: int = 0

    def __post_init__(self):
        self.mutation_kinds = tuple(self.mutation_kinds)
        self.validate()

    def validate(self) -> None:
        for name in ("alpha1", "alpha2", "beta1", "beta2", "lr"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("inner_steps", "num_task", "support_size", "query_size", "batch_size",
                     "n_buckets", "patience", "mutations_per_episode"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.steps_per_epoch is not None and self.steps_per_epoch < 1:
            raise ValueError("steps_per_epoch must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.pairing not in ("cross", "straight"):
            raise ValueError(f"pairing must be 'cross' or 'straight', got {self.pairing!r}")
        bad = set(self.mutation_kinds) - set(MUTATION_KINDS)
        if bad or not self.mutation_kinds:
            raise ValueError(f"mutation_kinds must be a nonempty subset of {MUTATION_KINDS}")

    @classmethod
    def from_json(cls, obj: Mapping) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown train config field(s): {sorted(unknown)}")
        return cls(**obj)

    def to_json(self) -> dict:
        out = {f.name: getattr(self, f.name) for f in fields(self)}
        out["mutation_kinds"] = list(self.mutation_kinds)
        return out


# -- episodes ------------------------------------------------------------------

@dataclass
class Episode:
    clean_support: list
    adv_support: list
    clean_query: list
    adv_query: list
    mutations: list
    base_graph: KnowledgeGraph
    adv_graph: KnowledgeGraph

    @property
    def mutation(self) -> GraphMutation:
        return self.mutations[0]


def references(sample: DialogueSample, triple: tuple, graph: KnowledgeGraph, hops: int = 1) -> bool:
    """Does the sample talk about ``triple``: tail in the response, head within reach of the context?"""
    h, _, t = triple
    if graph.entities[t] not in sample.response:
        return False
    index = graph.entity_index
    sources = [index[tok] for tok in sample.context if tok in index]
    if h in sources:
        return True
    return hops > 1 and h in graph.reachable(sources, hops - 1)


def rewrite(sample: DialogueSample, mutation: GraphMutation, graph: KnowledgeGraph, graph_id: str) -> DialogueSample:
    """Adversarial copy of ``sample``: swap the mutated tail (or relation name) in its response."""
    (_, r, t), (_, r2, t2) = mutation.removed, mutation.added
    if t != t2:
        old, new = graph.entities[t], graph.entities[t2]
    else:
        old, new = graph.relations[r], graph.relations[r2]
    response = tuple(new if tok == old else tok for tok in sample.response)
    return DialogueSample(sample.context, response, graph_id, ADVERSARIAL)


class EpisodeSampler:
    """Draws episodes from a fixed pool of clean samples bound to one graph."""

    def __init__(self, pool: Sequence[DialogueSample], graph: KnowledgeGraph, cfg: TrainConfig,
                 hops: int = 1, exclude: Iterable[tuple] = ()):
        self.pool = list(pool)
        self.graph = graph
        self.cfg = cfg
        self.hops = hops
        self.need = cfg.support_size + cfg.query_size
        excluded = set(map(tuple, exclude))
        self.index: dict[tuple, list[int]] = {}
        for triple in graph.sorted_triples():
            if triple in excluded:
                continue
            hits = [i for i, s in enumerate(self.pool) if references(s, triple, graph, hops)]
            if len(hits) >= self.need:
                self.index[triple] = hits

    def sample(self, rng: np.random.Generator) -> Episode:
        kinds = list(self.cfg.mutation_kinds)
        first = int(rng.integers(len(kinds)))
        for kind in kinds[first:] + kinds[:first]:
            triples = [tr for tr in self.index if mutation_candidates(self.graph, tr, kind)]
            if triples:
                break
        else:
            raise EpisodeError(f"no mutable triple is referenced by >= {self.need} samples "
                               f"(pool of {len(self.pool)})")
        triple = triples[int(rng.integers(len(triples)))]
        adv_graph, mutation = mutate(self.graph, rng, kind, triple=triple)
        mutations = [mutation]
        for _ in range(self.cfg.mutations_per_episode - 1):
            extra_kind = self.cfg.mutation_kinds[int(rng.integers(len(self.cfg.mutation_kinds)))]
            adv_graph, extra = mutate(adv_graph, rng, extra_kind)
            mutations.append(extra)
        hits = self.index[triple]
        chosen = [self.pool[hits[i]] for i in rng.choice(len(hits), size=self.need, replace=False)]
        adv = []
        for s in chosen:
            for m in mutations:
                s = rewrite(s, m, self.graph, adv_graph.graph_id)
            adv.append(s)
        k = self.cfg.support_size
        return Episode(chosen[:k], adv[:k], chosen[k:], adv[k:], mutations, self.graph, adv_graph)


def sample_episode(pool: Sequence[DialogueSample], graph: KnowledgeGraph, cfg: TrainConfig,
                   rng: np.random.Generator, hops: int = 1, exclude: Iterable[tuple] = ()) -> Episode:
    return EpisodeSampler(pool, graph, cfg, hops, exclude).sample(rng)


# -- adaptation ----------------------------------------------------------------

def sgd_step(params: ModelParams, grads: Mapping[str, np.ndarray], lr: float) -> ModelParams:
    return params.with_arrays({k: params.arrays[k] - lr * g for k, g in grads.items()})


def inner_adapt(params: ModelParams, batch: Sequence, graph, lr: float, steps: int = 1,
                objective: Objective = loss_and_grad) -> ModelParams:
    """``steps`` plain gradient-descent steps on the mean batch loss; ``params`` is left untouched."""
    if not batch:
        raise ValueError("inner_adapt needs a nonempty batch")
    for _ in range(steps):
        _, grads, _ = objective(params, batch, graph)
        params = sgd_step(params, grads, lr)
    return params


@dataclass
class AdaptResult:
    params: ModelParams
    loss_before: float
    loss_after: float


def mean_loss(params: ModelParams, samples: Sequence, graph, objective: Objective = loss_and_grad) -> float:
    if objective is loss_and_grad:
        total, _ = total_nll(params, samples, graph)
        return total / len(samples)
    return float(objective(params, samples, graph)[0])


def fast_adapt(params: ModelParams, support: Sequence, graph, steps: int = 5, lr: float = 0.05,
               objective: Objective = loss_and_grad) -> AdaptResult:
    """Evaluation-time adaptation to a few samples of an unseen graph regime."""
    if not support:
        raise ValueError("fast_adapt needs a nonempty support set")
    before = mean_loss(params, support, graph, objective)
    adapted = inner_adapt(params, support, graph, lr, steps, objective) if steps > 0 else params
    after = mean_loss(adapted, support, graph, objective) if steps > 0 else before
    log.info("fast_adapt: support loss %.4f -> %.4f (%d steps, lr=%g)", before, after, steps, lr)
    return AdaptResult(adapted, before, after)


# -- meta-update ---------------------------------------------------------------

@dataclass(frozen=True)
class MetaOptState:
    clean: AdamState = field(default_factory=AdamState)
    adv: AdamState = field(default_factory=AdamState)


@dataclass
class MetaStepInfo:
    query_nll: float = 0.0
    query_tokens: int = 0


def _accumulate(acc: dict, grads: Mapping[str, np.ndarray]) -> None:
    for k in sorted(grads):
        acc[k] = acc[k] + grads[k] if k in acc else np.array(grads[k])


def _midpoint(a: ModelParams, b: ModelParams) -> ModelParams:
    return a.with_arrays({k: 0.5 * (a.arrays[k] + b.arrays[k]) for k in a.arrays})


def meta_step(params: ModelParams, episodes: Sequence[Episode], cfg: TrainConfig,
              opt_state: MetaOptState | None = None, objective: Objective = loss_and_grad,
              lr_scale: float = 1.0) -> tuple[ModelParams, MetaOptState, MetaStepInfo]:
    """One first-order adversarial meta-update over a batch of episodes."""
    if not episodes:
        raise ValueError("meta_step needs at least one episode")
    if cfg.mode not in (ADML, IMPROVED):
        raise ValueError(f"meta_step runs in adml modes, not {cfg.mode!r}")
    opt_state = opt_state or MetaOptState()
    a1, a2 = cfg.alpha1 * lr_scale, cfg.alpha2 * lr_scale
    g_clean, g_adv = {}, {}
    info = MetaStepInfo()
    base = params

    def query(theta, samples, graph, acc):
        loss, grads, n_tok = objective(theta, samples, graph)
        _accumulate(acc, grads)
        info.query_nll += loss * len(samples)
        info.query_tokens += n_tok

    for ep in episodes:
        theta_clean = inner_adapt(base, ep.clean_support, ep.base_graph, a1, cfg.inner_steps, objective)
        if not cfg.adversarial:
            query(theta_clean, ep.clean_query, ep.base_graph, g_clean)
            if cfg.mode == IMPROVED:
                base = theta_clean
            continue
        theta_adv = inner_adapt(base, ep.adv_support, ep.adv_graph, a2, cfg.inner_steps, objective)
        if cfg.pairing == "cross":
            query(theta_clean, ep.adv_query, ep.adv_graph, g_clean)
            query(theta_adv, ep.clean_query, ep.base_graph, g_adv)
        else:
            query(theta_clean, ep.clean_query, ep.base_graph, g_clean)
            query(theta_adv, ep.adv_query, ep.adv_graph, g_adv)
        if cfg.mode == IMPROVED:
            base = _midpoint(theta_clean, theta_adv)

    start = base if cfg.mode == IMPROVED else params
    arrays, clean_state = adam_update(start.arrays, g_clean, opt_state.clean, lr=cfg.beta1 * lr_scale)
    adv_state = opt_state.adv
    if g_adv:
        arrays, adv_state = adam_update(arrays, g_adv, opt_state.adv, lr=cfg.beta2 * lr_scale)
    return params.with_arrays(arrays), MetaOptState(clean_state, adv_state), info


# -- training loop -------------------------------------------------------------

@dataclass(frozen=True)
class LossRecord:
    epoch: int
    bucket: int
    split: str
    mode: str
    loss: float
    ppl: float


@dataclass
class TrainResult:
    params: ModelParams
    log: list
    lr_scale: float = 1.0


def _graph_lookup(graph, gid: str) -> KnowledgeGraph:
    return graph if isinstance(graph, KnowledgeGraph) else graph[gid]


def _ppl(loss: float) -> float:
    return math.exp(loss) if loss < 700 else math.inf


def train(split: Split, graph, params: ModelParams, cfg: TrainConfig,
          sinks: Sequence[Callable[[LossRecord], None]] = (),
          exclude: Iterable[tuple] = (), objective: Objective = loss_and_grad) -> TrainResult:
    """Train per length bucket; log train/valid per-token loss for every epoch and bucket.

    ``exclude`` lists triples that episode sampling must never mutate (held out
    for evaluation).  All learning rates are halved whenever the overall
    validation loss has not improved for ``cfg.patience`` epochs in a row.
    """
    rng = np.random.default_rng(cfg.seed)
    train_buckets = split.buckets(split.train)
    valid_buckets = split.buckets(split.valid)
    hops = params.config.hops if params.config else 1
    exclude = tuple(map(tuple, exclude))
    samplers: dict[tuple, EpisodeSampler | None] = {}
    adam, meta_state = AdamState(), MetaOptState()
    scale, best, stale = 1.0, math.inf, 0
    records: list[LossRecord] = []

    def emit(rec: LossRecord) -> None:
        records.append(rec)
        for sink in sinks:
            sink(rec)

    def sampler_for(b: int, gid: str, pool) -> EpisodeSampler | None:
        key = (b, gid)
        if key not in samplers:
            sampler = EpisodeSampler(pool, _graph_lookup(graph, gid), cfg, hops, exclude)
            samplers[key] = sampler if sampler.index else None
            if samplers[key] is None:
                log.warning("bucket %d (graph %s): no triple has enough referencing samples; "
                            "skipping meta-training there", b, gid)
        return samplers[key]

    for epoch in range(1, cfg.epochs + 1):
        for b, bucket in enumerate(train_buckets):
            if not bucket:
                if epoch == 1:
                    log.warning("training bucket %d is empty; skipped", b)
                continue
            nll, tokens = 0.0, 0
            if cfg.mode == PLAIN:
                n_batches = math.ceil(len(bucket) / cfg.batch_size)
                steps = cfg.steps_per_epoch or n_batches
                order = rng.permutation(len(bucket))
                for step in range(steps):
                    if step and step % n_batches == 0:
                        order = rng.permutation(len(bucket))
                    j = step % n_batches
                    batch = [bucket[i] for i in order[j * cfg.batch_size:(j + 1) * cfg.batch_size]]
                    loss, grads, n_tok = objective(params, batch, graph)
                    arrays, adam = adam_update(params.arrays, grads, adam, lr=cfg.lr * scale)
                    params = params.with_arrays(arrays)
                    nll += loss * len(batch)
                    tokens += n_tok
            else:
                by_graph: dict[str, list] = {}
                for s in bucket:
                    by_graph.setdefault(s.graph_id, []).append(s)
                gids = [g for g in sorted(by_graph) if sampler_for(b, g, by_graph[g]) is not None]
                if not gids:
                    continue
                per_step = cfg.num_task * (cfg.support_size + cfg.query_size)
                steps = cfg.steps_per_epoch or max(1, len(bucket) // per_step)
                for _ in range(steps):
                    gid = gids[int(rng.integers(len(gids)))]
                    sampler = samplers[(b, gid)]
                    episodes = [sampler.sample(rng) for _ in range(cfg.num_task)]
                    params, meta_state, info = meta_step(params, episodes, cfg, meta_state, objective, scale)
                    nll += info.query_nll
                    tokens += info.query_tokens
            if tokens:
                emit(LossRecord(epoch, b, "train", cfg.mode, nll / tokens, _ppl(nll / tokens)))
        v_nll, v_tok = 0.0, 0
        for b, vb in enumerate(valid_buckets):
            if not vb:
                continue
            total, n_tok = total_nll(params, vb, graph)
            v_nll += total
            v_tok += n_tok
            emit(LossRecord(epoch, b, "valid", cfg.mode, total / n_tok, _ppl(total / n_tok)))
        if v_tok:
            overall = v_nll / v_tok
            if overall < best:
                best, stale = overall, 0
            else:
                stale += 1
                if stale >= cfg.patience:
                    scale *= 0.5
                    stale = 0
                    log.info("epoch %d: validation stalled, learning rates scaled to %g", epoch, scale)
    return TrainResult(params, records, scale)
