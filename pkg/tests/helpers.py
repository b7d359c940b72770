"""Small random instances shared by the test modules."""

import numpy as np

from kgdial.corpus import SPECIALS, DialogueSample, Vocabulary
from kgdial.kg import KnowledgeGraph
from kgdial.model import ModelConfig, ModelParams, config_for, init_params


def random_graph(rng, n_entities=6, n_relations=2, density=0.35, graph_id="g"):
    entities = tuple(f"e{i}" for i in range(n_entities))
    relations = tuple(f"r{j}" for j in range(n_relations))
    mask = rng.random((n_entities, n_relations, n_entities)) < density
    triples = frozenset(map(tuple, np.argwhere(mask).tolist()))
    return KnowledgeGraph(entities, relations, triples, graph_id)


def tiny_vocab(graph, n_words=10):
    extra = tuple(f"w{i}" for i in range(n_words - len(SPECIALS)))
    return Vocabulary(SPECIALS + extra, graph.entities)


def random_samples(rng, vocab, graph, n=2, ctx_len=(2, 4), resp_len=(1, 3)):
    """Samples mixing generic words and entities; contexts always mention an entity."""
    words = vocab.words[len(SPECIALS):]
    out = []
    for _ in range(n):
        lc = int(rng.integers(ctx_len[0], ctx_len[1] + 1))
        lr = int(rng.integers(resp_len[0], resp_len[1] + 1))
        ctx = [str(rng.choice(words)) for _ in range(lc - 1)] + [str(rng.choice(graph.entities))]
        resp = [str(rng.choice(words + graph.entities)) for _ in range(lr)]
        out.append(DialogueSample(ctx, resp, graph.graph_id))
    return out


def tiny_model(seed, hops=1, n_entities=6, n_relations=2, n_words=10, hidden=8, scale=0.5):
    """Random graph, vocabulary and parameters with non-saturated activations."""
    rng = np.random.default_rng(seed)
    graph = random_graph(rng, n_entities, n_relations)
    vocab = tiny_vocab(graph, n_words)
    config = config_for(vocab, graph, hidden=hidden, embed=hidden, hops=hops, init_scale=scale)
    return graph, vocab, init_params(config, vocab, seed), rng


def zero_params(vocab, graph, **kw):
    config = config_for(vocab, graph, **kw)
    return ModelParams({k: np.zeros(s) for k, s in config.shapes().items()}, config, vocab)


def uniform_output_params(vocab, graph, **kw):
    """Zero weights with the gate bias set so that o_t is uniform over the joint vocabulary
    whenever k_t is uniform (contexts with no entity hit the uniform fallback)."""
    p = zero_params(vocab, graph, entity_smoothing=0.0, **kw)
    arrays = dict(p.arrays)
    b = np.zeros(vocab.n_words + 1)
    b[-1] = np.log(vocab.n_entities)
    arrays["ctrl.b"] = b
    return p.with_arrays(arrays)


__all__ = ["ModelConfig", "random_graph", "tiny_vocab", "random_samples", "tiny_model",
           "zero_params", "uniform_output_params"]
