import json

import numpy as np
import pytest

from helpers import random_graph
from kgdial.kg import (RELATION_SWAP, TAIL_SWAP, GraphError, GraphMutation, KnowledgeGraph, UnmutableGraphError,
                       build_adjacency, entity_indicator, entity_token, load_graph, mutate, triples_from_adjacency)


def chain_graph():
    return KnowledgeGraph(("a", "b", "c"), ("r",), frozenset({(0, 0, 1), (1, 0, 2)}))


def test_adjacency_empty():
    g = KnowledgeGraph(("a", "b"), ("r", "s"), frozenset())
    A = build_adjacency(g)
    assert A.shape == (2, 2, 2) and not A.any()


def test_adjacency_readout():
    A = build_adjacency(chain_graph())
    expected = np.zeros((3, 1, 3))
    expected[0, 0, 1] = expected[1, 0, 2] = 1
    np.testing.assert_array_equal(A, expected)


@pytest.mark.parametrize("seed", range(10))
def test_adjacency_counts_and_bijection(seed):
    g = random_graph(np.random.default_rng(seed), 7, 3)
    A = g.adjacency
    assert A.sum() == len(g.triples)
    assert set(np.unique(A)) <= {0.0, 1.0}
    assert triples_from_adjacency(A) == set(g.triples)
    assert not A.flags.writeable


def test_graph_validation():
    with pytest.raises(GraphError):
        KnowledgeGraph(("a", "a"), ("r",), frozenset())
    with pytest.raises(GraphError):
        KnowledgeGraph(("a",), ("r", "r"), frozenset())
    with pytest.raises(GraphError):
        KnowledgeGraph(("a",), ("r",), frozenset({(0, 0, 1)}))


def test_entity_token_joins_words():
    assert entity_token("Feng Ruozhao") == "Feng-Ruozhao"
    g = KnowledgeGraph(("Jin Xi", "Feng Ruozhao"), ("EnemyOf",), frozenset({(0, 0, 1)}))
    assert g.entities == ("Jin-Xi", "Feng-Ruozhao")


def test_entity_indicator():
    g = chain_graph()
    np.testing.assert_array_equal(entity_indicator(["hello", "there"], g), [0, 0, 0])
    np.testing.assert_array_equal(entity_indicator(["a"], g), [1, 0, 0])
    np.testing.assert_array_equal(entity_indicator(["x", "a", "y", "c"], g), [1, 0, 1])
    np.testing.assert_array_equal(entity_indicator(["a", "a", "c", "c"], g), entity_indicator(["a", "c"], g))


def test_indicator_set_membership_oracle():
    rng = np.random.default_rng(0)
    g = random_graph(rng, 8, 2)
    for _ in range(50):
        toks = list(rng.choice(list(g.entities) + ["w1", "w2", "w3"], size=5))
        s = entity_indicator(toks, g)
        assert [i for i in range(8) if s[i]] == sorted({g.entity_index[t] for t in toks if t in g.entity_index})


def test_figure_example_tail_swap():
    # Jin-Xi's self loop occupies the only other candidate, so the swap is forced
    g = KnowledgeGraph(("Jin Xi", "Feng Ruozhao", "Nian Shilan"), ("EnemyOf",),
                       frozenset({(0, 0, 1), (0, 0, 0)}))
    new, m = mutate(g, np.random.default_rng(0), TAIL_SWAP, triple=(0, 0, 1))
    e = new.entities
    assert (e[m.added[0]], new.relations[m.added[1]], e[m.added[2]]) == ("Jin-Xi", "EnemyOf", "Nian-Shilan")
    assert new.triples == frozenset({(0, 0, 2), (0, 0, 0)})
    assert m.describe(g) == "Jin-Xi:EnemyOf:Feng-Ruozhao->EnemyOf:Nian-Shilan"


def test_single_candidate_forced():
    g = KnowledgeGraph(("a", "b"), ("r",), frozenset({(0, 0, 1)}))
    for seed in range(5):
        new, m = mutate(g, np.random.default_rng(seed), TAIL_SWAP)
        assert m.added == (0, 0, 0)
        assert new.triples == frozenset({(0, 0, 0)})


def test_unmutable_graphs():
    with pytest.raises(UnmutableGraphError):
        mutate(KnowledgeGraph(("a",), ("r",), frozenset({(0, 0, 0)})), np.random.default_rng(0), TAIL_SWAP)
    with pytest.raises(UnmutableGraphError):
        mutate(chain_graph(), np.random.default_rng(0), RELATION_SWAP)
    with pytest.raises(UnmutableGraphError):
        mutate(KnowledgeGraph(("a", "b"), ("r",), frozenset()), np.random.default_rng(0), TAIL_SWAP)


@pytest.mark.parametrize("kind", [TAIL_SWAP, RELATION_SWAP])
def test_hundred_seeded_mutations(kind):
    g = random_graph(np.random.default_rng(42), 6, 3)
    for seed in range(100):
        new, m = mutate(g, np.random.default_rng(seed), kind)
        assert g.triples - new.triples == {m.removed}
        assert new.triples - g.triples == {m.added}
        assert len(g.triples ^ new.triples) == 2
        assert m.removed[0] == m.added[0]
        if kind == TAIL_SWAP:
            assert m.removed[1] == m.added[1] and m.removed[2] != m.added[2]
        else:
            assert m.removed[2] == m.added[2] and m.removed[1] != m.added[1]


def test_mutation_is_uniform_over_candidates():
    g = KnowledgeGraph(tuple("abcd"), ("r",), frozenset({(0, 0, 1)}))
    counts = {}
    for seed in range(3000):
        m = mutate(g, np.random.default_rng(seed), TAIL_SWAP)[1]
        counts[m.added[2]] = counts.get(m.added[2], 0) + 1
    assert set(counts) == {0, 2, 3}
    assert all(abs(c / 3000 - 1 / 3) < 0.04 for c in counts.values())


def test_mutation_validation():
    with pytest.raises(GraphError):
        GraphMutation((0, 0, 1), (1, 0, 1), TAIL_SWAP)
    with pytest.raises(GraphError):
        GraphMutation((0, 0, 1), (0, 1, 2), TAIL_SWAP)
    with pytest.raises(GraphError):
        GraphMutation((0, 0, 1), (0, 0, 2), RELATION_SWAP)
    with pytest.raises(GraphError):
        GraphMutation((0, 0, 1), (0, 0, 2), TAIL_SWAP).apply(chain_graph().with_triples({(0, 0, 1), (0, 0, 2)}))


def test_mutated_graph_id_and_description():
    g = chain_graph()
    new, m = mutate(g, np.random.default_rng(0), TAIL_SWAP, triple=(1, 0, 2))
    assert new.graph_id.startswith("default~")
    assert m.describe(g).startswith("b:r:c->r:")


def test_json_round_trip(tmp_path):
    g = random_graph(np.random.default_rng(3), 5, 2, graph_id="scene")
    obj = g.to_json()
    assert all(isinstance(x, str) for tr in obj["triples"] for x in tr)
    path = tmp_path / "g.json"
    path.write_text(json.dumps(obj))
    back = load_graph(path)
    assert back == g


def test_json_errors():
    with pytest.raises(GraphError):
        KnowledgeGraph.from_json({"entities": ["a"], "relations": ["r"]})
    with pytest.raises(GraphError):
        KnowledgeGraph.from_json({"entities": ["a"], "relations": ["r"], "triples": [["a", "r", "zz"]]})
    with pytest.raises(GraphError):
        KnowledgeGraph.from_json({"entities": ["a", "b"], "relations": ["r"],
                                  "triples": [["a", "r", "b"], ["a", "r", "b"]]})


def test_multiword_names_resolve_in_json():
    g = KnowledgeGraph.from_json({"entities": ["Jin Xi", "Feng Ruozhao"], "relations": ["EnemyOf"],
                                  "triples": [["Jin Xi", "EnemyOf", "Feng-Ruozhao"]]})
    assert g.triples == frozenset({(0, 0, 1)})


def test_reachable():
    g = chain_graph()
    assert g.reachable([0], 0) == {0}
    assert g.reachable([0], 1) == {0, 1}
    assert g.reachable([0], 2) == {0, 1, 2}
