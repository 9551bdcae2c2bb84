import csv

import numpy as np
import pytest

from dncf.convexify import convexity_probe, negative_mass
from dncf.icnn_demo import (Dataset2D, compare, decision_grid, gen_dataset, median_table,
                            perceptron_separates, train_model, write_grid)

FAST = dict(epochs=300, hidden=(32, 32))


def test_dataset_contracts():
    for kind in ("blobs", "moons", "rings"):
        d = gen_dataset(kind, 101, 0.1, 3)
        assert np.all(np.isfinite(d.points)) and d.points.shape == (101, 2)
        counts = np.bincount(d.labels)
        assert abs(counts[0] - counts[1]) <= 0.1 * 101
        again = gen_dataset(kind, 101, 0.1, 3)
        assert np.array_equal(d.points, again.points) and np.array_equal(d.labels, again.labels)
    with pytest.raises(ValueError):
        gen_dataset("spirals")
    with pytest.raises(ValueError):
        gen_dataset("blobs", n=5)


def test_blobs_separable_rings_not():
    assert perceptron_separates(gen_dataset("blobs", 200, 0.1, 0))
    assert not perceptron_separates(gen_dataset("rings", 200, 0.1, 0), epochs=200)


def test_ficnn_weights_exactly_nonnegative_and_convex():
    data = gen_dataset("blobs", 60, 0.1, 0)
    m = train_model("ficnn", data, **FAST)
    for name in m.params.group("convex"):
        assert m.params[name].data.min() >= 0.0
    assert convexity_probe(m.spec, m.params, 1000, seed=2, low=-1, high=2).max_violation <= 1e-9


def test_cvxr_gamma_zero_is_unconstrained():
    data = gen_dataset("blobs", 60, 0.1, 0)
    m = train_model("cvxr", data, gamma=0.0, **FAST)
    assert set(m.gammas) == {0.0}
    assert negative_mass(m.params, m.params.group("convex")) > 0


def test_cvxr_negative_mass_decreases_with_gamma():
    data = gen_dataset("rings", 60, 0.1, 0)
    masses = [negative_mass(train_model("cvxr", data, gamma=g, epochs=300, hidden=(32, 32),
                                        lr=0.01).params)
              for g in (0.0, 1e-3, 1e-2)]
    assert masses[0] >= masses[1] >= masses[2]


def test_unknown_variant():
    with pytest.raises(ValueError):
        train_model("mlp", gen_dataset("blobs", 20))


def test_constant_and_linear_grids(tmp_path):
    g = decision_grid(lambda p: np.full(len(p), 2.0), resolution=32)
    assert np.all(g.scores == 2.0)
    g = decision_grid(lambda p: p[:, 0] - 0.5 * p[:, 1] - 0.3, resolution=256)
    assert g.scores.shape == (256, 256) and g.xs[0] == -3 and g.xs[-1] == 3
    # first column index where each row turns positive, against the exact line
    cols = np.argmax(g.scores > 0, axis=1)
    expected = (0.5 * g.ys + 0.3 + 3) / 6 * 255
    assert np.max(np.abs(cols - expected)) < 1.0 + 1e-9
    write_grid(g, tmp_path / "g.png", tmp_path / "g.csv")
    with open(tmp_path / "g.csv") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["x", "y", "score"] and len(rows) == 256 * 256 + 1
    with pytest.raises(ValueError):
        decision_grid(lambda p: p[:, 0], resolution=8)


def test_compare_and_median(tmp_path):
    rows = compare(["blobs"], ["ficnn", "cvxr"], seeds=range(2), n=40, epochs=50,
                   out_dir=tmp_path)
    assert len(rows) == 4
    table = median_table(rows)
    assert set(table) == {("blobs", "ficnn"), ("blobs", "cvxr")}
    assert (tmp_path / "blobs_cvxr.png").exists() and (tmp_path / "blobs_ficnn.csv").exists()
