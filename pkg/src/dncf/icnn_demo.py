"""Two-class 2-D comparison of hard-constrained and soft-regularized input-convex scorers.

Variants share one architecture (two hidden layers of 200 units):

* ``ficnn`` and ``picnn`` clamp their ``convex`` weight group to be
  nonnegative after every gradient step;
* ``cvxr`` leaves weights free and adds the soft penalty
  ``gamma * ||max(-theta, 0)||_1`` with the adaptive gamma rule.

A model scores (point, label proposal) pairs and predicts the proposal
with the lower score.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from statistics import median

import numpy as np

from . import autodiff as ad
from .convexify import GammaSchedule, adapt_gamma, initial_gamma, negative_mass, reg_full
from .io import save_image
from .networks import NetworkSpec, ParamSet, build_ficnn, forward, init_params, project_nonnegative
from .optimize import NumericalAbort

DATASETS = ("blobs", "moons", "rings")
VARIANTS = ("ficnn", "picnn", "cvxr")


@dataclass
class Dataset2D:
    points: np.ndarray
    labels: np.ndarray
    kind: str
    seed: int


def gen_dataset(kind: str = "blobs", n: int = 200, noise: float = 0.1, seed: int = 0) -> Dataset2D:
    """Balanced two-class point cloud inside roughly [-3, 3]^2."""
    if kind not in DATASETS:
        raise ValueError(f"unknown dataset {kind!r}; expected one of {DATASETS}")
    if n < 10:
        raise ValueError("n must be >= 10")
    rng = np.random.default_rng(seed)
    n1 = n // 2
    n0 = n - n1
    if kind == "blobs":
        a = rng.normal([-1.5, -1.5], 0.4, size=(n0, 2))
        b = rng.normal([1.5, 1.5], 0.4, size=(n1, 2))
    elif kind == "moons":
        t0 = rng.uniform(0, np.pi, n0)
        t1 = rng.uniform(0, np.pi, n1)
        a = np.stack([np.cos(t0), np.sin(t0)], axis=1) * 1.5 + [-0.75, -0.4]
        b = np.stack([1 - np.cos(t1), -np.sin(t1)], axis=1) * 1.5 + [-0.75, 0.4]
    else:
        t0 = rng.uniform(0, 2 * np.pi, n0)
        t1 = rng.uniform(0, 2 * np.pi, n1)
        a = np.stack([np.cos(t0), np.sin(t0)], axis=1) * rng.uniform(0.0, 1.0, (n0, 1))
        b = np.stack([np.cos(t1), np.sin(t1)], axis=1) * rng.uniform(1.7, 2.5, (n1, 1))
    pts = np.concatenate([a, b]) + noise * rng.standard_normal((n, 2))
    labels = np.concatenate([np.zeros(n0, int), np.ones(n1, int)])
    order = rng.permutation(n)
    return Dataset2D(pts[order], labels[order], kind, seed)


def perceptron_separates(data: Dataset2D, epochs: int = 1000) -> bool:
    """True iff the classic perceptron finds a separating line within ``epochs`` passes."""
    x = np.hstack([data.points, np.ones((len(data.points), 1))])
    s = 2 * data.labels - 1
    w = np.zeros(3)
    for _ in range(epochs):
        mistakes = 0
        for xi, si in zip(x, s):
            if si * (xi @ w) <= 0:
                w += si * xi
                mistakes += 1
        if mistakes == 0:
            return True
    return False


@dataclass
class IcnnModel:
    variant: str
    spec: NetworkSpec
    params: ParamSet
    history: list[float] = field(default_factory=list)
    gammas: list[float] = field(default_factory=list)

    def scores(self, points) -> np.ndarray:
        """(N, 2) scores of proposals 0 and 1."""
        pts = np.asarray(points, dtype=np.float64)
        self.params.track(())
        cols = [forward(self.spec, self.params, (pts, np.full((len(pts), 1), float(k)))).data
                for k in (0, 1)]
        return np.stack(cols, axis=1)

    def predict(self, points) -> np.ndarray:
        s = self.scores(points)
        return (s[:, 1] < s[:, 0]).astype(int)

    def accuracy(self, data: Dataset2D) -> float:
        return float(np.mean(self.predict(data.points) == data.labels))


def _pairs(data: Dataset2D) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    n = len(data.points)
    pts = np.concatenate([data.points, data.points])
    proposals = np.concatenate([np.zeros((n, 1)), np.ones((n, 1))])
    targets = (proposals[:, 0] != np.concatenate([data.labels, data.labels])).astype(np.float64)
    return pts, proposals, targets


def _train(variant, data, gamma, epochs, lr, seed, hidden) -> IcnnModel:
    spec = build_ficnn(2, hidden, partial=(variant == "picnn"))
    params = init_params(spec, seed)
    # A clamped He init sums ~fan_in/2 positive terms per unit and blows up
    # the first scores; shrinking the convex group keeps every variant sane.
    for name in params.group("convex"):
        params[name].data /= np.sqrt(params[name].shape[1])
    if variant != "cvxr":
        params = project_nonnegative(params, "convex")
    pts, proposals, targets = _pairs(data)
    model = IcnnModel(variant, spec, params)
    sched = None
    for _ in range(epochs):
        params.track(params.names())
        with ad.Tape() as tape:
            fit = ad.mse_loss(forward(spec, params, (pts, proposals)), targets)
            if variant == "cvxr":
                if sched is None:
                    g0 = initial_gamma(fit.item(), negative_mass(params)) if gamma is None else gamma
                    sched = GammaSchedule(g0)
                reg = reg_full(params, "l1", sched.gamma)
                loss = ad.add(fit, reg)
            else:
                loss = fit
        if not np.isfinite(loss.item()):
            raise FloatingPointError(f"loss = {loss.item()}")
        tape.backward(loss)
        for name in params.names():
            t = params[name]
            t.data -= lr * t.grad
        if variant == "cvxr":
            model.gammas.append(sched.gamma)
            sched = adapt_gamma(sched, fit.item(), reg.item())
        else:
            for name in params.group("convex"):
                np.maximum(params[name].data, 0.0, out=params[name].data)
        model.history.append(loss.item())
    params.track(())
    return model


def train_model(variant: str, data: Dataset2D, gamma: float | None = None, epochs: int = 2000,
                seed: int = 0, lr: float = 0.01, hidden=(200, 200)) -> IcnnModel:
    """Full-batch (projected) gradient descent on the squared compatibility loss.

    ``gamma`` only affects ``cvxr``; None picks a start where the penalty
    is 1% of the initial fit term.  A non-finite loss retries once at half
    the learning rate.
    """
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    try:
        return _train(variant, data, gamma, epochs, lr, seed, hidden)
    except FloatingPointError:
        try:
            return _train(variant, data, gamma, epochs, lr / 2, seed, hidden)
        except FloatingPointError as exc:
            raise NumericalAbort(f"{variant} training diverged twice: {exc}") from exc


@dataclass
class Grid:
    scores: np.ndarray
    xs: np.ndarray
    ys: np.ndarray


def decision_grid(model, bounds: tuple[float, float] = (-3.0, 3.0), resolution: int = 256) -> Grid:
    """Score margin ``E(p, 0) - E(p, 1)`` over a square grid; positive means class 1.

    ``model`` may be an :class:`IcnnModel` or any callable mapping (N, 2)
    points to N scores.  Rows run along y, columns along x.
    """
    if resolution < 16:
        raise ValueError("resolution must be >= 16")
    lo, hi = bounds
    xs = np.linspace(lo, hi, resolution)
    ys = np.linspace(lo, hi, resolution)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    if isinstance(model, IcnnModel):
        s = model.scores(pts)
        vals = s[:, 0] - s[:, 1]
    else:
        vals = np.asarray(model(pts), dtype=np.float64)
    return Grid(vals.reshape(resolution, resolution), xs, ys)


def grid_image(grid: Grid) -> np.ndarray:
    """Map the grid to [0, 1] grey levels with the zero level at 0.5."""
    s = grid.scores
    scale = np.max(np.abs(s))
    return np.full_like(s, 0.5) if scale == 0 else 0.5 + 0.5 * s / scale


def write_grid(grid: Grid, png_path, csv_path) -> None:
    save_image(grid_image(grid)[None], png_path)
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x", "y", "score"])
        for i, yv in enumerate(grid.ys):
            for j, xv in enumerate(grid.xs):
                w.writerow([repr(float(xv)), repr(float(yv)), repr(float(grid.scores[i, j]))])


@dataclass
class ComparisonRow:
    dataset: str
    variant: str
    seed: int
    accuracy: float
    negative_mass: float
    final_loss: float


def compare(datasets=DATASETS, variants=VARIANTS, seeds=range(5), n: int = 200,
            noise: float = 0.1, epochs: int = 2000, lr: float = 0.01,
            out_dir: str | Path | None = None) -> list[ComparisonRow]:
    """Train every (dataset, variant, seed); optionally write grids for seed 0."""
    rows = []
    for kind in datasets:
        for seed in seeds:
            data = gen_dataset(kind, n, noise, seed)
            for variant in variants:
                model = train_model(variant, data, epochs=epochs, seed=seed, lr=lr)
                rows.append(ComparisonRow(kind, variant, seed, model.accuracy(data),
                                          negative_mass(model.params), model.history[-1]))
                if out_dir is not None and seed == list(seeds)[0]:
                    out = Path(out_dir)
                    out.mkdir(parents=True, exist_ok=True)
                    write_grid(decision_grid(model), out / f"{kind}_{variant}.png",
                               out / f"{kind}_{variant}.csv")
    return rows


def median_table(rows: list[ComparisonRow]) -> dict[tuple[str, str], float]:
    groups: dict[tuple[str, str], list[float]] = {}
    for r in rows:
        groups.setdefault((r.dataset, r.variant), []).append(r.accuracy)
    return {k: median(v) for k, v in groups.items()}
