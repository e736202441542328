"""Exercise the Python bindings end to end on a small synthetic corpus."""

import json
import math
import os
import tempfile

import advcaps


def main():
    assert advcaps.tokenize("Ana are mere. Ion nu!") == [["ana", "are", "mere"], ["ion", "nu"]]

    v = advcaps.squash([3.0, 4.0])
    assert abs(math.hypot(*v) - 25.0 / 26.0) < 1e-12

    w = advcaps.perturb("capsula", seed=3)
    assert len(w) == len("capsula") and sum(a != b for a, b in zip(w, "capsula")) == 1

    docs, emb_text = advcaps.gen_synth(120, 80, seed=4, dim=8)
    adv = advcaps.augment(docs, seed=1)
    assert [l for _, l in adv] == [l for _, l in docs]
    assert adv == advcaps.augment(docs, seed=1)

    emb = advcaps.Embeddings.parse(emb_text)
    assert len(emb) == 80 and emb.dimension == 8

    config = {
        "encoder": {"kind": "bigru", "hidden_dim": 6},
        "head": {"n_pc": 2, "n_cc": 6, "d": 8},
        "learning_rate": 0.002,
        "epochs": 2,
        "batch_size": 16,
        "n_s": 3,
        "n_w": 8,
        "seed": 31,
    }
    result = advcaps.train(json.dumps(config), docs, emb, threads=2)
    assert len(result.history) == 4
    assert result.metrics_csv().startswith("epoch,split,loss")

    model = result.model
    p = model.probabilities(docs[0][0], emb)
    assert abs(sum(p) - 1.0) < 1e-12
    assert len(model.representation(docs[0][0], emb, "class")) == 2 * 8

    test_docs = [docs[i] for i in result.test_indices]
    assert model.evaluate(test_docs, emb)["loss"] == result.test["loss"]

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.caps")
        model.save(path)
        again = advcaps.Model.load(path)
        assert again.to_bytes() == model.to_bytes()

    try:
        advcaps.Model.from_bytes(b"nope")
    except ValueError:
        pass
    else:
        raise AssertionError("corrupt model accepted")

    print("smoke test passed")


if __name__ == "__main__":
    main()
