"""Knowledge-grounded GRU seq2seq with an entity-copy gate and multi-hop graph reasoning.

At each decoder step the hidden state ``d`` drives

* a controller softmax over ``|W| + 1`` classes: one per generic word plus a
  "copy from graph" class whose probability is the gate ``c``;
* a per-head relation distribution ``R`` (|V| x |L|, row-softmax);
* a transition matrix ``T[i, y] = sum_j R[i, j] A[i, j, y]``, and an entity
  distribution ``k`` obtained by pushing the context-entity indicator ``s``
  through ``T`` ``hops`` times and normalizing.

The output distribution over the joint vocabulary is ``[w ; c * k]``.
"""

from __future__ import annotations

import base64
import json
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from . import tensor as tc
from .corpus import CorpusError, DialogueSample, Vocabulary
from .kg import KnowledgeGraph
from .tensor import ShapeError, Tape, Tensor

CHECKPOINT_FORMAT = 1


@dataclass(frozen=True)
class ModelConfig:
    n_words: int
    n_entities: int
    n_relations: int
    hidden: int = 256
    embed: int = 256
    hops: int = 1
    init_scale: float = 0.08
    entity_smoothing: float = 1e-6
    dead_end_eps: float = 1e-12

    def __post_init__(self):
        if self.hops < 1:
            raise ValueError(f"hop count must be >= 1, got {self.hops}")
        for name in ("n_words", "n_entities", "n_relations", "hidden", "embed"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")

    def shapes(self) -> dict[str, tuple]:
        H, E = self.hidden, self.embed
        shapes = {"embedding": (self.n_words + self.n_entities, E)}
        for block, in_dim in (("enc", E), ("dec", E)):
            shapes[f"{block}.w_in"] = (in_dim, 3 * H)
            shapes[f"{block}.w_hid"] = (H, 3 * H)
            shapes[f"{block}.b_in"] = (3 * H,)
            shapes[f"{block}.b_hid"] = (3 * H,)
        shapes["ctrl.w"] = (H, self.n_words + 1)
        shapes["ctrl.b"] = (self.n_words + 1,)
        shapes["rel.w"] = (H, self.n_entities * self.n_relations)
        shapes["rel.b"] = (self.n_entities * self.n_relations,)
        return shapes


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class ModelParams:
    """Immutable parameter snapshot. ``config``/``vocab`` may be None for bare surrogates."""

    arrays: Mapping[str, np.ndarray]
    config: ModelConfig | None = None
    vocab: Vocabulary | None = None
    lineage: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "arrays", {k: _frozen(v) for k, v in sorted(self.arrays.items())})
        if self.config is not None:
            expected = self.config.shapes()
            got = {k: v.shape for k, v in self.arrays.items()}
            if got != expected:
                raise ShapeError(f"parameter shapes {got} do not match config {expected}")
        if self.vocab is not None and self.config is not None:
            if (self.vocab.n_words, self.vocab.n_entities) != (self.config.n_words, self.config.n_entities):
                raise ShapeError("vocabulary sizes do not match the model config")

    def with_arrays(self, arrays: Mapping[str, np.ndarray]) -> "ModelParams":
        merged = dict(self.arrays)
        merged.update(arrays)
        return ModelParams(merged, self.config, self.vocab, self.lineage)

    def bind(self, tape: Tape | None = None) -> "Bound":
        return Bound(self, tape)

    def flat(self) -> np.ndarray:
        return np.concatenate([v.ravel() for v in self.arrays.values()])

    def distance(self, other: "ModelParams") -> float:
        return float(max(np.max(np.abs(self.arrays[k] - other.arrays[k])) for k in self.arrays))


def init_params(config: ModelConfig, vocab: Vocabulary | None = None, seed: int = 0) -> ModelParams:
    """Uniform(-init_scale, init_scale) initialization, drawn in sorted parameter order."""
    rng = np.random.default_rng(seed)
    arrays = {name: rng.uniform(-config.init_scale, config.init_scale, size=shape)
              for name, shape in sorted(config.shapes().items())}
    return ModelParams(arrays, config, vocab, (int(seed),))


def config_for(vocab: Vocabulary, graph: KnowledgeGraph, **kwargs) -> ModelConfig:
    return ModelConfig(vocab.n_words, vocab.n_entities, graph.n_relations, **kwargs)


class Bound:
    """Parameters lifted into tensors, tracked when a tape is given."""

    def __init__(self, params: ModelParams, tape: Tape | None = None):
        self.params = params
        self.config = params.config
        self.tape = tape
        if tape is None:
            self.t = {k: Tensor(v) for k, v in params.arrays.items()}
        else:
            self.t = {k: tape.watch(k, v) for k, v in params.arrays.items()}

    def __getitem__(self, name: str) -> Tensor:
        return self.t[name]


def _bound(params) -> Bound:
    return params if isinstance(params, Bound) else params.bind()


# -- forward pieces ------------------------------------------------------------

def gru(x, h, P: Bound, block: str) -> Tensor:
    return tc.gru_step(x, h, P[f"{block}.w_in"], P[f"{block}.w_hid"], P[f"{block}.b_in"], P[f"{block}.b_hid"])


def encode(tokens, params, mask: np.ndarray | None = None) -> Tensor:
    """Final encoder state from a zero start; ``tokens`` is (L,) or (B, L) with an optional 0/1 mask."""
    P = _bound(params)
    ids = np.asarray(tokens, dtype=np.int64)
    if ids.shape[-1] == 0:
        raise ValueError("cannot encode an empty token sequence")
    batch_shape = ids.shape[:-1]
    h = Tensor(np.zeros(batch_shape + (P.config.hidden,)))
    for pos in range(ids.shape[-1]):
        x = tc.take_rows(P["embedding"], ids[..., pos])
        h_new = gru(x, h, P, "enc")
        if mask is None or mask[..., pos].all():
            h = h_new
        else:
            m = mask[..., pos:pos + 1].astype(np.float64)
            h = h + m * (h_new - h)
    return h


def controller_step(d, params) -> tuple[Tensor, Tensor]:
    """Gate ``c`` (trailing axis of size 1) and word distribution ``w`` from one softmax."""
    P = _bound(params)
    probs = tc.softmax(tc.matmul(d, P["ctrl.w"]) + P["ctrl.b"], axis=-1)
    n = P["ctrl.b"].shape[0] - 1
    return tc.index(probs, (..., slice(n, n + 1))), tc.index(probs, (..., slice(0, n)))


def relation_distribution(d, params) -> Tensor:
    """Row-stochastic |V| x |L| matrix (leading batch axes preserved)."""
    P = _bound(params)
    cfg = P.config
    logits = tc.matmul(d, P["rel.w"]) + P["rel.b"]
    logits = tc.reshape(logits, logits.shape[:-1] + (cfg.n_entities, cfg.n_relations))
    return tc.softmax(logits, axis=-1)


_TRANSITION_SUBSCRIPTS = {(2, 3): "ij,ijy->iy", (3, 3): "bij,ijy->biy", (3, 4): "bij,bijy->biy"}
_HOP_SUBSCRIPTS = {(1, 2): "i,iy->y", (2, 2): "bi,iy->by", (2, 3): "bi,biy->by"}


def transition(R, A) -> Tensor:
    R, A = tc.as_tensor(R), tc.as_tensor(A)
    key = (R.data.ndim, A.data.ndim)
    if key not in _TRANSITION_SUBSCRIPTS or R.shape[-2:] != A.shape[-3:-1]:
        raise ShapeError(f"relation matrix {R.shape} incompatible with adjacency {A.shape}")
    return tc.einsum(_TRANSITION_SUBSCRIPTS[key], R, A)


def propagate(s, T, hops: int) -> Tensor:
    """Unnormalized ``s^T T^hops``."""
    if hops < 1:
        raise ValueError("hop count must be >= 1")
    s, T = tc.as_tensor(s), tc.as_tensor(T)
    sub = _HOP_SUBSCRIPTS.get((s.data.ndim, T.data.ndim))
    if sub is None:
        raise ShapeError(f"indicator {s.shape} incompatible with transition {T.shape}")
    raw = s
    for _ in range(hops):
        raw = tc.einsum(sub, raw, T)
    return raw


def multi_hop(s, T, hops: int, eps: float = 1e-12) -> tuple[Tensor, np.ndarray]:
    """Entity distribution after ``hops`` transitions; uniform where the walk dies (flag returned)."""
    return tc.normalize_or_uniform(propagate(s, T, hops), eps)


@dataclass
class DecodeState:
    hidden: Tensor
    gate: Tensor
    words: Tensor
    entities: Tensor
    output: Tensor
    dead_end: np.ndarray


def decode_step(prev_tokens, prev_state, s, A, params) -> tuple[DecodeState, Tensor]:
    """One decoder step; ``prev_state`` starts as the encoder output."""
    P = _bound(params)
    cfg = P.config
    x = tc.take_rows(P["embedding"], np.asarray(prev_tokens, dtype=np.int64))
    d = gru(x, prev_state, P, "dec")
    c, w = controller_step(d, P)
    k, dead = multi_hop(s, transition(relation_distribution(d, P), A), cfg.hops, cfg.dead_end_eps)
    if cfg.entity_smoothing > 0:
        k = k * (1.0 - cfg.entity_smoothing) + cfg.entity_smoothing / cfg.n_entities
    o = tc.concat([w, c * k], axis=-1)
    return DecodeState(d, c, w, k, o, dead), o


# -- batching ------------------------------------------------------------------

@dataclass
class Batch:
    ctx: np.ndarray
    ctx_mask: np.ndarray
    tgt_in: np.ndarray
    tgt_out: np.ndarray
    tgt_len: np.ndarray
    s: np.ndarray

    @property
    def size(self) -> int:
        return len(self.tgt_len)

    @property
    def n_tokens(self) -> int:
        return int(self.tgt_len.sum())


def _ids(seq, vocab: Vocabulary) -> list[int]:
    if len(seq) and isinstance(seq[0], (int, np.integer)):
        ids = [int(i) for i in seq]
        if any(not 0 <= i < len(vocab) for i in ids):
            raise CorpusError(f"token ids {ids} fall outside the vocabulary of size {len(vocab)}")
        return ids
    return vocab.encode(seq)


def make_batch(samples: Sequence, vocab: Vocabulary) -> Batch:
    """Pad samples (or ``(context, response)`` pairs); targets are response + EOS."""
    ctxs, tgts = [], []
    for smp in samples:
        context, response = (smp.context, smp.response) if isinstance(smp, DialogueSample) else smp
        ctxs.append(_ids(context, vocab) or [vocab.pad])
        tgt = _ids(response, vocab)
        if not tgt:
            raise CorpusError("response must be nonempty")
        tgts.append(tgt + [vocab.eos])
    B = len(samples)
    lc, lt = max(map(len, ctxs)), max(map(len, tgts))
    ctx = np.full((B, lc), vocab.pad, dtype=np.int64)
    ctx_mask = np.zeros((B, lc))
    tgt_in = np.full((B, lt), vocab.pad, dtype=np.int64)
    tgt_out = np.full((B, lt), vocab.pad, dtype=np.int64)
    s = np.zeros((B, vocab.n_entities))
    for b, (c, t) in enumerate(zip(ctxs, tgts)):
        ctx[b, :len(c)] = c
        ctx_mask[b, :len(c)] = 1.0
        tgt_in[b, :len(t)] = [vocab.bos] + t[:-1]
        tgt_out[b, :len(t)] = t
        ents = [i - vocab.n_words for i in c if i >= vocab.n_words]
        s[b, ents] = 1.0
    return Batch(ctx, ctx_mask, tgt_in, tgt_out, np.array([len(t) for t in tgts]), s)


def _adjacency(graph: KnowledgeGraph, config: ModelConfig) -> np.ndarray:
    if (graph.n_entities, graph.n_relations) != (config.n_entities, config.n_relations):
        raise ShapeError(f"graph {graph.graph_id!r} has |V|={graph.n_entities}, |L|={graph.n_relations}; "
                         f"model expects {config.n_entities}, {config.n_relations}")
    return graph.adjacency


def batch_nll(P: Bound, batch: Batch, A: np.ndarray, collect: bool = False):
    """Summed teacher-forced NLL over all target tokens of the batch.

    With ``collect`` also returns per-step output probabilities (B, V_total)
    and dead-end flags, for metrics.
    """
    d = encode(batch.ctx, P, batch.ctx_mask)
    total = None
    outputs, dead_ends = [], []
    for pos in range(batch.tgt_in.shape[1]):
        state, o = decode_step(batch.tgt_in[:, pos], d, batch.s, A, P)
        d = state.hidden
        active = np.flatnonzero(batch.tgt_len > pos)
        if len(active) < batch.size:
            o_act = tc.take_rows(o, active)
        else:
            o_act = o
        nll = -tc.sum(tc.log(tc.pick(o_act, batch.tgt_out[active, pos])))
        total = nll if total is None else total + nll
        if collect:
            outputs.append(o.data)
            dead_ends.append(state.dead_end)
    if collect:
        return total, outputs, dead_ends
    return total


def _group_by_graph(samples: Sequence[DialogueSample], graph) -> list[tuple[KnowledgeGraph, list]]:
    if isinstance(graph, KnowledgeGraph):
        return [(graph, list(samples))]
    groups: dict[str, list] = {}
    for s in samples:
        groups.setdefault(s.graph_id, []).append(s)
    try:
        return [(graph[gid], group) for gid, group in groups.items()]
    except KeyError as exc:
        raise CorpusError(f"unknown graph id {exc}") from None


def loss_and_grad(params: ModelParams, samples: Sequence[DialogueSample], graph) -> tuple[float, dict, int]:
    """Mean per-sample sequence loss, its gradient, and the target token count."""
    if not samples:
        raise ValueError("empty sample set")
    tape = Tape()
    P = params.bind(tape)
    total, n_tokens = None, 0
    for g, group in _group_by_graph(samples, graph):
        batch = make_batch(group, params.vocab)
        part = batch_nll(P, batch, _adjacency(g, params.config))
        total = part if total is None else total + part
        n_tokens += batch.n_tokens
    loss = total * (1.0 / len(samples))
    grads = tc.backward(loss, tape)
    return float(loss.data), grads, n_tokens


def total_nll(params: ModelParams, samples: Sequence[DialogueSample], graph) -> tuple[float, int]:
    """Summed NLL and token count, untracked."""
    P = params.bind()
    total, n_tokens = 0.0, 0
    for g, group in _group_by_graph(samples, graph):
        batch = make_batch(group, params.vocab)
        total += float(batch_nll(P, batch, _adjacency(g, params.config)).data)
        n_tokens += batch.n_tokens
    return total, n_tokens


def sequence_loss(sample, params: ModelParams, graph: KnowledgeGraph) -> float:
    """Teacher-forced ``-sum_t log o_t(y_t)`` for one sample (targets include EOS)."""
    batch = make_batch([sample], params.vocab)
    return float(batch_nll(params.bind(), batch, _adjacency(graph, params.config)).data)


@dataclass
class TeacherForced:
    targets: np.ndarray
    predictions: np.ndarray
    nll: float


def teacher_forced(params: ModelParams, samples: Sequence[DialogueSample], graph) -> list[TeacherForced]:
    """Per-sample targets, argmax predictions and NLL under teacher forcing."""
    P = params.bind()
    out = []
    for smp in samples:
        g = graph if isinstance(graph, KnowledgeGraph) else graph[smp.graph_id]
        batch = make_batch([smp], params.vocab)
        total, outputs, _ = batch_nll(P, batch, _adjacency(g, params.config), collect=True)
        preds = np.array([int(np.argmax(o[0])) for o in outputs])
        out.append(TeacherForced(batch.tgt_out[0], preds, float(total.data)))
    return out


def generate(context, params: ModelParams, graph: KnowledgeGraph, max_len: int = 20) -> list[str]:
    """Greedy decoding; stops at EOS (not emitted) or after ``max_len`` tokens."""
    return params.vocab.decode(generate_ids(context, params, graph, max_len))


def generate_ids(context, params: ModelParams, graph: KnowledgeGraph, max_len: int = 20) -> list[int]:
    if max_len < 1:
        raise ValueError("max_len must be >= 1")
    vocab = params.vocab
    P = params.bind()
    ctx = _ids(list(context), vocab) or [vocab.pad]
    A = _adjacency(graph, params.config)
    s = np.zeros(vocab.n_entities)
    s[[i - vocab.n_words for i in ctx if i >= vocab.n_words]] = 1.0
    d = encode(np.array(ctx), P)
    prev, out = vocab.bos, []
    for _ in range(max_len):
        state, o = decode_step(prev, d, s, A, P)
        d = state.hidden
        prev = int(np.argmax(o.data))
        if prev == vocab.eos:
            break
        out.append(prev)
    return out


# -- checkpoints ---------------------------------------------------------------

def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape), "dtype": "<f8",
            "data": base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")}


def _decode_array(obj: dict) -> np.ndarray:
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=obj.get("dtype", "<f8")).reshape(obj["shape"]).astype(np.float64)


def checkpoint_bytes(params: ModelParams, run_config: Mapping | None = None) -> bytes:
    obj = {
        "format_version": CHECKPOINT_FORMAT,
        "config": asdict(params.config) if params.config else None,
        "vocab": params.vocab.to_json() if params.vocab else None,
        "lineage": list(params.lineage),
        "params": {k: _encode_array(v) for k, v in params.arrays.items()},
        "run_config": dict(run_config) if run_config is not None else None,
    }
    return (json.dumps(obj, sort_keys=True, indent=1) + "\n").encode("utf-8")


def params_from_checkpoint(data: bytes | str) -> tuple[ModelParams, dict | None]:
    obj = json.loads(data)
    version = obj.get("format_version")
    if version is None or version > CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format version {version!r}")
    config = ModelConfig(**obj["config"]) if obj.get("config") else None
    vocab = Vocabulary.from_json(obj["vocab"]) if obj.get("vocab") else None
    arrays = {k: _decode_array(v) for k, v in obj["params"].items()}
    return ModelParams(arrays, config, vocab, tuple(obj.get("lineage", ()))), obj.get("run_config")
