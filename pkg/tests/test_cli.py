import json

import numpy as np
import pytest

from kgdial.cli import atomic_write, export_loss_curves, main, read_loss_curves
from kgdial.meta import LossRecord
from kgdial.model import params_from_checkpoint

SMALL = {"hidden": 8, "embed": 8, "epochs": 2, "steps_per_epoch": 2, "n_buckets": 2}


def write_json(path, obj):
    path.write_text(json.dumps(obj))
    return str(path)


@pytest.fixture()
def data(tmp_path):
    cfg = write_json(tmp_path / "synth.json", {"n_samples": 120, "seed": 2})
    assert main(["synth", "--config", cfg, "--out", str(tmp_path / "d")]) == 0
    return tmp_path, tmp_path / "d" / "corpus.jsonl", tmp_path / "d" / "graph.json"


def test_synth_outputs(data):
    tmp, corpus, graph = data
    assert len(corpus.read_text().splitlines()) == 120
    g = json.loads(graph.read_text())
    assert len(g["entities"]) == 30 and len(g["triples"]) == 40
    run = json.loads((tmp / "d" / "run_config.json").read_text())
    assert run["synth"]["seed"] == 2 and run["synth"]["n_samples"] == 120


def test_seed_flag_overrides_config(tmp_path):
    cfg = write_json(tmp_path / "s.json", {"n_samples": 30, "seed": 2})
    main(["synth", "--config", cfg, "--seed", "5", "--out", str(tmp_path / "a")])
    assert json.loads((tmp_path / "a" / "run_config.json").read_text())["synth"]["seed"] == 5


def test_train_writes_checkpoint_and_curves(data):
    tmp, corpus, graph = data
    cfg = write_json(tmp / "t.json", SMALL)
    out = tmp / "run"
    assert main(["train", "--config", cfg, "--mode", "plain", "--corpus", str(corpus), "--graph", str(graph),
                 "--out", str(out)]) == 0
    params, run = params_from_checkpoint((out / "model.ckpt.json").read_bytes())
    assert run["train"]["mode"] == "plain" and run["model"]["hidden"] == 8
    assert json.loads((out / "run_config.json").read_text()) == run
    rows = read_loss_curves(out / "loss.csv")
    assert {r.split for r in rows} == {"train", "valid"} and {r.epoch for r in rows} == {1, 2}
    for b in {r.bucket for r in rows}:
        assert read_loss_curves(out / f"loss_bucket{b}.csv") == [r for r in rows if r.bucket == b]


def test_train_defaults_follow_published_rates(data):
    tmp, corpus, graph = data
    cfg = write_json(tmp / "t.json", {"hidden": 8, "embed": 8, "epochs": 1, "steps_per_epoch": 1})
    main(["train", "--mode", "adml", "--config", cfg, "--corpus", str(corpus), "--graph", str(graph),
          "--out", str(tmp / "r")])
    run = json.loads((tmp / "r" / "run_config.json").read_text())["train"]
    assert [run[k] for k in ("alpha1", "alpha2", "beta1", "beta2")] == [1e-3] * 4
    assert run["num_task"] == 4 and run["mode"] == "adml"


def test_mutate_adapt_eval_generate(data, capsys):
    tmp, corpus, graph = data
    cfg = write_json(tmp / "t.json", SMALL)
    main(["train", "--config", cfg, "--corpus", str(corpus), "--graph", str(graph), "--out", str(tmp / "r")])
    ckpt = str(tmp / "r" / "model.ckpt.json")
    assert main(["mutate", "--corpus", str(corpus), "--graph", str(graph), "--seed", "1", "--out",
                 str(tmp / "m")]) == 0
    support = tmp / "m" / "corpus.jsonl"
    assert support.read_text()
    assert main(["adapt", "--checkpoint", ckpt, "--support", str(support), "--graph", str(tmp / "m" / "graph.json"),
                 "--steps", "3", "--lr", "0.05", "--out", str(tmp / "adapted.json")]) == 0
    _, run = params_from_checkpoint((tmp / "adapted.json").read_bytes())
    assert run["steps"] == 3 and run["loss_after"] < run["loss_before"]
    assert main(["eval", "--checkpoint", ckpt, "--corpus", str(corpus), "--graph", str(graph),
                 "--out", str(tmp / "report.json")]) == 0
    report = json.loads((tmp / "report.json").read_text())
    assert report["run_config"]["command"] == "eval" and report["report"]["n_samples"] == 120
    assert (tmp / "report.txt").read_text().startswith("KW-Acc")
    ctx = tmp / "ctx.txt"
    ctx.write_text("who is the rel0 of E01 ?\n\n" + json.dumps({"context": "tell me the rel1 of E02"}) + "\n")
    capsys.readouterr()
    assert main(["generate", "--checkpoint", ckpt, "--corpus", str(ctx), "--graph", str(graph)]) == 0
    lines = [json.loads(x) for x in capsys.readouterr().out.splitlines()]
    assert [x["context"] for x in lines] == ["who is the rel0 of E01 ?", "tell me the rel1 of E02"]


def test_untrained_model_perplexity_near_vocab_size(tmp_path):
    # 4 entities + 2 relations + 10 words + 4 specials = 20 tokens; every response
    # entity is a one-hop neighbour of the context entity, as in real data
    ents = [f"e{i}" for i in range(4)]
    words = list("abcdfghijk")
    triples = [[ents[i], "r0", ents[(i + 1) % 4]] for i in range(4)] + \
        [[ents[i], "r1", ents[(i + 2) % 4]] for i in range(4)]
    graph = write_json(tmp_path / "g.json", {"id": "g", "entities": ents, "relations": ["r0", "r1"],
                                             "triples": triples})
    rng = np.random.default_rng(0)
    lines = []
    for i in range(60):
        h, rel = int(rng.integers(4)), int(rng.integers(2))
        ctx = " ".join(list(rng.choice(words, 3)) + [ents[h], f"r{rel}"])
        resp = " ".join(list(rng.choice(words, 2)) + [ents[(h + 1 + rel) % 4]])
        lines.append(json.dumps({"context": ctx, "response": resp, "graph": "g"}))
    corpus = tmp_path / "c.jsonl"
    corpus.write_text("\n".join(lines) + "\n")
    cfg = write_json(tmp_path / "t.json", {"hidden": 16, "embed": 16, "epochs": 0})
    assert main(["train", "--config", cfg, "--corpus", str(corpus), "--graph", graph, "--out",
                 str(tmp_path / "r")]) == 0
    params, _ = params_from_checkpoint((tmp_path / "r" / "model.ckpt.json").read_bytes())
    assert len(params.vocab) == 20
    main(["eval", "--checkpoint", str(tmp_path / "r" / "model.ckpt.json"), "--corpus", str(corpus),
          "--graph", graph, "--out", str(tmp_path / "rep.json")])
    ppl = json.loads((tmp_path / "rep.json").read_text())["report"]["ppl"]
    assert 10 <= ppl <= 40


def test_errors_exit_nonzero_with_diagnostic(data, capsys):
    tmp, corpus, graph = data
    bad = write_json(tmp / "bad.json", {"hidden": 8, "learning_rate": 3})
    assert main(["train", "--config", bad, "--corpus", str(corpus), "--graph", str(graph), "--out",
                 str(tmp / "x")]) == 1
    assert "learning_rate" in capsys.readouterr().err
    bad = write_json(tmp / "bad2.json", {"alpha1": -1})
    assert main(["train", "--config", bad, "--corpus", str(corpus), "--graph", str(graph), "--out",
                 str(tmp / "x")]) == 1
    assert "alpha1" in capsys.readouterr().err
    assert main(["eval", "--checkpoint", str(tmp / "missing.json"), "--corpus", str(corpus), "--graph", str(graph),
                 "--out", str(tmp / "r.json")]) == 1
    with pytest.raises(SystemExit) as exc:
        main(["bogus"])
    assert exc.value.code != 0
    with pytest.raises(SystemExit) as exc:
        main(["train", "--nope"])
    assert exc.value.code != 0


# -- loss curves ---------------------------------------------------------------

def _records():
    return [LossRecord(e, b, s, "adml-improved", 1.0 / (e + b + 1), float(np.exp(1.0 / (e + b + 1))))
            for e in (2, 1) for b in (3, 1, 0, 2) for s in ("valid", "train")]


def test_export_loss_curves_rows_and_order(tmp_path):
    path = tmp_path / "loss.csv"
    export_loss_curves(_records(), path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,bucket,split,mode,loss,ppl"
    assert len(lines) == 17
    back = read_loss_curves(path)
    assert [(r.bucket, r.epoch) for r in back] == sorted((r.bucket, r.epoch) for r in back)
    assert {r.bucket for r in back} == {0, 1, 2, 3}
    assert sorted(back, key=repr) == sorted(_records(), key=repr)


def test_export_loss_curves_errors(tmp_path):
    with pytest.raises(ValueError):
        export_loss_curves([], tmp_path / "x.csv")
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError):
        export_loss_curves(_records(), blocker / "x.csv")


def test_atomic_write_leaves_no_temp_files(tmp_path):
    atomic_write(tmp_path / "a.txt", "one")
    atomic_write(tmp_path / "a.txt", b"two")
    assert (tmp_path / "a.txt").read_text() == "two"
    assert [p.name for p in tmp_path.iterdir()] == ["a.txt"]
