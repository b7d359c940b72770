"""Dialogue samples, vocabulary, splitting/bucketing and a synthetic corpus generator."""

from __future__ import annotations

import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .kg import KnowledgeGraph, entity_token

log = logging.getLogger(__name__)

PAD, BOS, EOS, UNK = "<pad>", "<bos>", "<eos>", "<unk>"
SPECIALS = (PAD, BOS, EOS, UNK)

CLEAN, ADVERSARIAL = "clean", "adversarial"


class CorpusError(ValueError):
    pass


@dataclass(frozen=True)
class DialogueSample:
    context: tuple[str, ...]
    response: tuple[str, ...]
    graph_id: str = "default"
    tag: str = CLEAN

    def __post_init__(self):
        object.__setattr__(self, "context", tuple(self.context))
        object.__setattr__(self, "response", tuple(self.response))
        if not self.response:
            raise CorpusError("response must be nonempty")
        if self.tag not in (CLEAN, ADVERSARIAL):
            raise CorpusError(f"unknown sample tag {self.tag!r}")

    def to_json(self) -> dict:
        return {"context": " ".join(self.context), "response": " ".join(self.response), "graph": self.graph_id}


# -- tokenization --------------------------------------------------------------

def _name_key(text: str) -> tuple[str, ...]:
    return tuple(text.replace("-", " ").split())


def tokenize(text: str, entity_names: Iterable[str] = ()) -> list[str]:
    """Whitespace tokens with longest-match merging of (possibly multi-word) entity names."""
    words = text.split()
    keys = {_name_key(n): entity_token(n) for n in entity_names}
    if not keys:
        return words
    # a single word can hold a dashed multi-part name, so bound by parts not words
    longest = max(len(k) for k in keys)
    out, i = [], 0
    while i < len(words):
        for width in range(min(longest, len(words) - i), 0, -1):
            hit = keys.get(_name_key(" ".join(words[i:i + width])))
            if hit is not None:
                out.append(hit)
                i += width
                break
        else:
            out.append(words[i])
            i += 1
    return out


# -- loading -------------------------------------------------------------------

def load_corpus(path: str | Path, graphs: Mapping[str, KnowledgeGraph]) -> list[DialogueSample]:
    """Read JSON lines ``{"context", "response", "graph"}`` bound to ``graphs`` by id."""
    samples = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                context, response, gid = obj["context"], obj["response"], obj["graph"]
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise CorpusError(f"{path}:{lineno}: malformed corpus line ({exc})") from None
            graph = graphs.get(gid)
            if graph is None:
                raise CorpusError(f"{path}:{lineno}: unknown graph id {gid!r}")
            try:
                samples.append(DialogueSample(tokenize(context, graph.entities),
                                              tokenize(response, graph.entities), gid))
            except CorpusError as exc:
                raise CorpusError(f"{path}:{lineno}: {exc}") from None
    return samples


def dump_corpus(samples: Iterable[DialogueSample]) -> str:
    return "".join(json.dumps(s.to_json(), sort_keys=True, ensure_ascii=False) + "\n" for s in samples)


# -- vocabulary ----------------------------------------------------------------

@dataclass(frozen=True)
class Vocabulary:
    """Generic words W (specials first) followed by entity tokens V in one index space."""

    words: tuple[str, ...]
    entities: tuple[str, ...]

    def __post_init__(self):
        if tuple(self.words[:len(SPECIALS)]) != SPECIALS:
            raise CorpusError("vocabulary must start with the special tokens")
        if set(self.words) & set(self.entities):
            raise CorpusError("generic words and entities overlap")
        object.__setattr__(self, "_index", {t: i for i, t in enumerate(self.words + self.entities)})

    @property
    def n_words(self) -> int:
        return len(self.words)

    @property
    def n_entities(self) -> int:
        return len(self.entities)

    def __len__(self) -> int:
        return len(self.words) + len(self.entities)

    pad = property(lambda self: 0)
    bos = property(lambda self: 1)
    eos = property(lambda self: 2)
    unk = property(lambda self: 3)

    def is_entity(self, idx: int) -> bool:
        return idx >= len(self.words)

    def token(self, idx: int) -> str:
        return self.words[idx] if idx < len(self.words) else self.entities[idx - len(self.words)]

    def encode(self, tokens: Sequence[str]) -> list[int]:
        return [self._index.get(t, 3) for t in tokens]

    def encode_strict(self, tokens: Sequence[str]) -> list[int]:
        try:
            return [self._index[t] for t in tokens]
        except KeyError as exc:
            raise CorpusError(f"token {exc} is outside the vocabulary") from None

    def decode(self, ids: Iterable[int]) -> list[str]:
        return [self.token(int(i)) for i in ids]

    def with_words(self, extra: Iterable[str]) -> "Vocabulary":
        new = [w for w in dict.fromkeys(extra) if w not in self._index]
        return Vocabulary(self.words + tuple(new), self.entities)

    def to_json(self) -> dict:
        return {"words": list(self.words), "entities": list(self.entities)}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(tuple(obj["words"]), tuple(obj["entities"]))


def build_vocab(samples: Sequence[DialogueSample], graph: KnowledgeGraph, min_count: int = 0) -> Vocabulary:
    """Specials, then words seen at least ``min_count`` times (most frequent first), then all entities.

    Relation names are always kept: mutations may write them into responses.
    """
    if not samples:
        raise CorpusError("cannot build a vocabulary from an empty sample list")
    ents = set(graph.entities)
    counts = Counter(t for s in samples for t in (*s.context, *s.response) if t not in ents)
    for special in SPECIALS:
        counts.pop(special, None)
    kept = sorted((w for w, c in counts.items() if c >= min_count), key=lambda w: (-counts[w], w))
    kept += sorted(r for r in graph.relations if r not in counts and r not in ents)
    return Vocabulary(SPECIALS + tuple(kept), graph.entities)


# -- splits and buckets --------------------------------------------------------

@dataclass
class Split:
    train: list
    valid: list
    test: list
    boundaries: tuple[float, ...]

    def bucket_of(self, sample: DialogueSample) -> int:
        return bucket_index(len(sample.response), self.boundaries)

    def buckets(self, samples: Sequence[DialogueSample]) -> list[list[DialogueSample]]:
        out = [[] for _ in range(len(self.boundaries) + 1)]
        for s in samples:
            out[self.bucket_of(s)].append(s)
        return out

    def to_json(self) -> dict:
        return {"boundaries": list(self.boundaries),
                "sizes": {"train": len(self.train), "valid": len(self.valid), "test": len(self.test)}}


def bucket_index(length: int, boundaries: Sequence[float]) -> int:
    return int(np.sum(np.asarray(boundaries) < length))


def split_and_bucket(samples: Sequence[DialogueSample], rng: np.random.Generator,
                     valid_frac: float = 0.05, test_frac: float = 0.10, n_buckets: int = 4) -> Split:
    """Shuffle into train/valid/test and fix response-length quantile boundaries on train."""
    n = len(samples)
    n_valid, n_test = int(round(valid_frac * n)), int(round(test_frac * n))
    if n < 20 or n_valid < 1 or n_test < 1 or n - n_valid - n_test < 1:
        raise CorpusError(f"{n} samples are too few to split {1 - valid_frac - test_frac:.0%}/"
                          f"{valid_frac:.0%}/{test_frac:.0%}")
    order = rng.permutation(n)
    shuffled = [samples[i] for i in order]
    valid, test, train = shuffled[:n_valid], shuffled[n_valid:n_valid + n_test], shuffled[n_valid + n_test:]
    lengths = np.array([len(s.response) for s in train], dtype=float)
    qs = np.arange(1, n_buckets) / n_buckets
    boundaries = tuple(float(b) for b in np.quantile(lengths, qs))
    return Split(train, valid, test, boundaries)


# -- synthetic corpus ----------------------------------------------------------

DEFAULT_TEMPLATES = (
    {"context": "who is the {r1} of {h} ?", "response": "{t}"},
    {"context": "tell me the {r1} of {h}", "response": "it is {t}"},
    {"context": "do you know {h} 's {r1} ?", "response": "yes , it is {t}"},
    {"context": "what about the {r1} of {h} ?", "response": "i think it is {t} ."},
)

TWO_HOP_TEMPLATES = (
    {"context": "who is the {r2} of the {r1} of {h} ?", "response": "{t}"},
    {"context": "tell me the {r2} of the {r1} of {h}", "response": "it is {t}"},
    {"context": "do you know the {r2} of {h} 's {r1} ?", "response": "yes , it is {t}"},
    {"context": "what about the {r2} of the {r1} of {h} ?", "response": "i think it is {t} ."},
)


@dataclass
class SynthSpec:
    n_entities: int = 30
    n_relations: int = 4
    n_triples: int = 40
    n_samples: int = 500
    hops: int = 1
    functional: bool = True
    templates: list = field(default_factory=lambda: [dict(t) for t in DEFAULT_TEMPLATES])
    seed: int = 0

    @classmethod
    def from_json(cls, obj: dict) -> "SynthSpec":
        known = set(cls.__dataclass_fields__)
        bad = set(obj) - known
        if bad:
            raise CorpusError(f"unknown synth spec field(s): {sorted(bad)}")
        spec = cls(**obj)
        if "templates" not in obj and spec.hops == 2:
            spec.templates = [dict(t) for t in TWO_HOP_TEMPLATES]
        return spec

    def to_json(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def _template_hops(template: dict) -> int:
    hops = 0
    while "{r%d}" % (hops + 1) in template["context"] or "{r%d}" % (hops + 1) in template["response"]:
        hops += 1
    return hops


def synth_graph(spec: SynthSpec, rng: np.random.Generator) -> KnowledgeGraph:
    nv, nl = spec.n_entities, spec.n_relations
    if nv < 2 or nl < 1:
        raise CorpusError("synthetic graph needs at least 2 entities and 1 relation")
    cap = nv * nl if spec.functional else nv * nl * (nv - 1)
    if not 0 <= spec.n_triples <= cap:
        raise CorpusError(f"n_triples={spec.n_triples} infeasible (max {cap} for this spec)")
    entities = tuple(f"E{i:0{len(str(nv - 1))}d}" for i in range(nv))
    relations = tuple(f"rel{j}" for j in range(nl))
    triples = set()
    if spec.functional:
        pairs = rng.choice(nv * nl, size=spec.n_triples, replace=False)
        for p in sorted(int(x) for x in pairs):
            h, r = divmod(p, nl)
            t = int(rng.integers(nv - 1))
            triples.add((h, r, t + (t >= h)))
    else:
        flat = rng.choice(nv * nl * (nv - 1), size=spec.n_triples, replace=False)
        for p in sorted(int(x) for x in flat):
            hr, t = divmod(p, nv - 1)
            h, r = divmod(hr, nl)
            triples.add((h, r, t + (t >= h)))
    return KnowledgeGraph(entities, relations, frozenset(triples), "synth")


def _paths(graph: KnowledgeGraph, hops: int) -> list[tuple]:
    """All relation-labelled walks of exactly ``hops`` edges: (h, r1..rN, t)."""
    out_edges: dict[int, list] = {}
    for h, r, t in graph.sorted_triples():
        out_edges.setdefault(h, []).append((r, t))
    walks = [((h,), h) for h in range(graph.n_entities)]
    for _ in range(hops):
        walks = [(w + (r,), t) for w, end in walks for r, t in out_edges.get(end, ())]
    return [w + (end,) for w, end in walks]


def synth_corpus(spec: SynthSpec) -> tuple[KnowledgeGraph, list[DialogueSample]]:
    """Random graph plus template dialogues whose answer is the tail of a graph walk.

    Each response names the walk's end entity, reachable from the context entity
    in exactly as many hops as the template has relation slots.
    """
    rng = np.random.default_rng(spec.seed)
    graph = synth_graph(spec, rng)
    if spec.n_samples == 0:
        return graph, []
    if not spec.templates:
        raise CorpusError("synthetic spec has no templates")
    by_hops: dict[int, list] = {}
    for tpl in spec.templates:
        by_hops.setdefault(_template_hops(tpl), []).append(tpl)
    paths = {k: _paths(graph, k) for k in by_hops}
    usable = [k for k in sorted(by_hops) if paths[k]]
    if not usable:
        raise CorpusError("graph has no walks matching the template hop counts")
    samples = []
    for _ in range(spec.n_samples):
        k = usable[int(rng.integers(len(usable)))]
        tpl = by_hops[k][int(rng.integers(len(by_hops[k])))]
        walk = paths[k][int(rng.integers(len(paths[k])))]
        fill = {"h": graph.entities[walk[0]], "t": graph.entities[walk[-1]]}
        fill.update({f"r{i + 1}": graph.relations[r] for i, r in enumerate(walk[1:-1])})
        context = tpl["context"].format(**fill).split()
        response = tpl["response"].format(**fill).split()
        samples.append(DialogueSample(context, response, graph.graph_id))
    return graph, samples
