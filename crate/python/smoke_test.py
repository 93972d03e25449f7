"""Smoke test for the `cdcr` Python extension.

Build and install first:

    pip install maturin
    maturin develop --release -m crates/python/Cargo.toml

then run `python python/smoke_test.py`.
"""

import math
import os
import tempfile

import cdcr


def main():
    data = cdcr.Dataset.generate(q=0.3, seed=7, n_train=300, n_test=150, n_features=8, n_classes=5)
    print(data)
    cand, truth = data.candidates(), data.true_labels()
    assert all(c >= t for crow, trow in zip(cand, truth) for c, t in zip(crow, trow))
    assert len(data.noise_rate_per_class()) == 5

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "data.json")
        data.save(path)
        again = cdcr.Dataset.load(path)
        assert again.candidates() == cand

        result = cdcr.train(data, method="CDCR", epochs=4, warmup_epochs=2, hidden=[16], max_lr=1e-2)
        history = result.history()
        assert len(history) == 4
        assert history[-1]["phase"] == "curriculum"
        ckpt = os.path.join(tmp, "checkpoint.json")
        result.save_checkpoint(ckpt)
        model = cdcr.Model.from_checkpoint(ckpt)

    probs = model.predict(data.test_features())
    assert len(probs) == data.n_test and all(0.0 < p < 1.0 for row in probs for p in row)
    report = cdcr.evaluate(probs, data.test_labels())
    assert math.isclose(report["map"], history[-1]["test"]["map"], rel_tol=0, abs_tol=1e-12)

    assert cdcr.average_precision([0.9, 0.7, 0.3], [True, False, True]) == 0.5 * (1 + 2 / 3)
    assert cdcr.average_precision([0.1], [False]) is None
    w = cdcr.estimate_weights([[0.9, 0.8, 0.7]], [[1, 1, 0]], 0.8)
    assert w == [[1, 1, 0]]
    b, b_bar = cdcr.compute_baselines([[0.9, 0.6], [0.7, 0.2]], [[1, 1], [1, 0]])
    assert math.isclose(b[0], 0.8) and math.isclose(b[1], 0.6)
    assert cdcr.estimate_weights_difficulty([[0.9, 0.8]], [[1, 1]], 0.8) == [[1, 1]]

    try:
        cdcr.train(data, alpah=0.5)
    except ValueError as e:
        assert "alpah" in str(e)
    else:
        raise AssertionError("unknown option accepted")

    print("mAP after 4 epochs: %.4f" % report["map"])
    print("smoke test passed")


if __name__ == "__main__":
    main()
