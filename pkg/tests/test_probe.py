import numpy as np
import pytest

from tinyssl import probe
from tinyssl.tensor import ContractError


def blobs(rng, n=60, d=5, sep=6.0):
    y = np.arange(n) % 3
    centers = rng.standard_normal((3, d)) * sep
    return centers[y] + rng.standard_normal((n, d)), y


def test_linear_probe_separates_blobs(rng):
    x, y = blobs(rng)
    clf = probe.train_linear_probe(x, y, probe.ProbeConfig(epochs=30, batch=16))
    assert probe.evaluate_accuracy(clf, x, y) == 1.0


def test_linear_probe_is_deterministic_and_needs_classes(rng):
    x, y = blobs(rng)
    cfg = probe.ProbeConfig(epochs=5, batch=16)
    a, b = probe.train_linear_probe(x, y, cfg, 3), probe.train_linear_probe(x, y, cfg, 3)
    assert np.array_equal(a.weight, b.weight)
    with pytest.raises(ContractError):
        probe.train_linear_probe(x, np.zeros(len(x), int), cfg)
    with pytest.raises(ValueError):
        probe.ProbeConfig(lr=-1)


def test_lr_zero_predicts_first_class(rng):
    x, y = blobs(rng)
    clf = probe.train_linear_probe(x, y, probe.ProbeConfig(lr=0.0, epochs=2))
    assert (clf.predict(x) == 0).all()


def test_knn_oracle_and_ties():
    f = np.array([[1, 0], [0.99, 0.1], [0, 1], [0.1, 0.99]], float)
    y = np.array([0, 0, 1, 1])
    assert probe.knn_probe(f, y, k=1) == 1.0
    # k=2 from row 0: neighbours 1 (class 0, nearest) and 3 (class 1) tie, nearest wins
    assert probe.knn_probe(f, y, k=2) == 1.0
    with pytest.raises(ContractError):
        probe.knn_probe(f, y, k=4)
    with pytest.raises(ContractError):
        probe.knn_probe(f, y, k=0)


def test_append_result(tmp_path):
    p = tmp_path / "results.csv"
    probe.append_result(p, "a", "ca_dssl", 1, 0.5)
    probe.append_result(p, "b", "byol", 2, 0.25)
    assert p.read_text().splitlines() == ["tag,method,seed,accuracy", "a,ca_dssl,1,0.500000", "b,byol,2,0.250000"]
