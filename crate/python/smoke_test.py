"""Smoke test for the latent_tilt extension module."""

import math
import os
import tempfile

import latent_tilt as lt


def main():
    data = lt.generate_synthetic(num_classes=8, dim=16, per_class=30, seed=3)
    assert len(data) == 240 and data.dim == 16 and data.num_classes == 8
    assert data.class_counts() == [30] * 8

    with tempfile.TemporaryDirectory() as tmp:
        for name in ("set.tlt", "set.jsonl"):
            path = os.path.join(tmp, name)
            data.save(path)
            back = lt.EmbeddingSet.load(path)
            assert back.labels() == data.labels()
            assert back.vectors() == data.vectors()
        try:
            lt.EmbeddingSet.load(os.path.join(tmp, "missing.tlt"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file should raise OSError")

    scores = [0.1, 0.5, -0.3, 0.9, 0.2]
    w = lt.tilt_weights(scores, 1.5)
    assert abs(sum(w) - 1.0) < 1e-12 and all(x > 0 for x in w)
    assert lt.tilt_weights(scores, 0.0) == [0.2] * 5

    lam = lt.solve_lambda(scores, 0.6)
    mean, var = lt.tilted_moments(scores, lam)
    assert abs(mean - 0.6) <= 1e-10 and var > 0
    logz = lt.log_partition(scores, lam)
    kl = lt.kl_to_uniform(scores, lam)
    assert abs(kl - (lam * mean - logz)) < 1e-10
    try:
        lt.solve_lambda(scores, 2.0)
    except (ValueError, RuntimeError):
        pass
    else:
        raise AssertionError("infeasible target should raise")

    vecs = [[1.0, 0.0], [0.9, 0.1], [0.0, 1.0], [0.1, 0.9]]
    support = lt.EmbeddingSet(vecs, [0, 0, 1, 1], 2)
    clf = lt.PrototypeClassifier.build(support)
    assert clf.temperature == 10.0
    assert clf.predict([1.0, 0.2]) == 0 and clf.predict([0.2, 1.0]) == 1
    post = clf.posterior([1.0, 0.2])
    assert abs(sum(post) - 1.0) < 1e-12 and post[0] > post[1]
    weighted = lt.PrototypeClassifier.build(support, weights=[0.4, 0.1, 0.25, 0.25])
    assert len(weighted.prototypes) == 2

    frozen = lt.run_benchmark(data, mode="frozen", episodes=20, seed=5)
    zero = lt.run_benchmark(data, mode="tilted-inductive", lam=0.0, episodes=20, seed=5)
    assert frozen["accuracies"] == zero["accuracies"]
    trans = lt.run_benchmark(data, mode="tilted-transductive", lam=1.0, episodes=20, seed=5, workers=2)
    assert len(trans["accuracies"]) == 20 and 0.0 <= trans["mean"] <= 1.0
    assert not math.isnan(trans["std"])

    checks = lt.validate_theory(seed=1, quick=True)
    failed = [name for name, ok, _ in checks if not ok]
    assert len(checks) == 9 and not failed, failed

    print(f"smoke test ok: frozen {frozen['mean']:.4f}, transductive {trans['mean']:.4f}")


if __name__ == "__main__":
    main()
