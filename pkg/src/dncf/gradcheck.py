"""Autodiff versus central finite differences for every op and the full denoise objective."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import autodiff as ad
from .networks import build_skip_net, forward, init_params
from .tasks import DncfProblem, make_objective, consistency_anchor, init_y


@dataclass
class GradCheck:
    name: str
    trials: int
    max_rel_error: float
    seconds: float
    skipped_fraction: float = 0.0

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error < tol


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Normwise relative error ``|a - n|_inf / max(|a|_inf, |n|_inf)``; 0 when both vanish."""
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)))
    if scale < 1e-12:
        return 0.0
    return float(np.max(np.abs(analytic - numeric)) / scale)


def _away_from_kinks(rng, shape, margin=0.05):
    """Standard normals pushed at least ``margin`` away from zero (relu/abs kinks)."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)


def _case(fn: Callable, *shapes, positive=False, kinks=False):
    """(f of numpy arrays -> Tensor, shapes, sampler)."""
    def sample(rng):
        out = []
        for s in shapes:
            if positive:
                out.append(rng.uniform(0.5, 2.0, s))
            elif kinks:
                out.append(_away_from_kinks(rng, s))
            else:
                out.append(rng.standard_normal(s))
        return out
    return fn, sample


def _weighted(op: Callable[..., ad.Tensor], out_shape_seed: int = 7):
    """Scalarize a tensor-valued op with a fixed random weighting."""
    cache = {}

    def f(*xs):
        out = op(*xs)
        if out.ndim == 0:
            return out
        if out.shape not in cache:
            cache[out.shape] = np.random.default_rng(out_shape_seed).standard_normal(out.shape)
        return ad.sum_(ad.mul(out, cache[out.shape]))
    return f


def op_cases() -> dict[str, tuple[Callable, Callable]]:
    labels = np.array([2, 0, 1])
    cases = {
        "add": _case(_weighted(ad.add), (3, 4), (4,)),
        "sub": _case(_weighted(ad.sub), (3, 4), (3, 4)),
        "mul": _case(_weighted(ad.mul), (3, 4), (3, 1)),
        "relu": _case(_weighted(ad.relu), (5, 4), kinks=True),
        "leaky_relu": _case(_weighted(ad.leaky_relu), (5, 4), kinks=True),
        "sigmoid": _case(_weighted(ad.sigmoid), (5, 4)),
        "tanh": _case(_weighted(ad.tanh), (5, 4)),
        "square": _case(_weighted(ad.square), (5, 4)),
        "negative_part": _case(_weighted(ad.negative_part), (5, 4), kinks=True),
        "abs": _case(_weighted(ad.abs_), (5, 4), kinks=True),
        "sqrt": _case(_weighted(ad.sqrt), (5, 4), positive=True),
        "sum": _case(ad.sum_, (3, 4)),
        "mean": _case(ad.mean, (3, 4)),
        "mse_loss": _case(ad.mse_loss, (3, 4), (3, 4)),
        "l2_sq": _case(ad.l2_sq, (7,)),
        "l2_norm": _case(ad.l2_norm, (7,)),
        "l1": _case(ad.l1, (7,), kinks=True),
        "reshape": _case(_weighted(lambda x: ad.reshape(x, (4, 3))), (3, 4)),
        "concat": _case(_weighted(lambda a, b: ad.concat([a, b], axis=1)), (2, 3), (2, 2)),
        "index": _case(_weighted(lambda x: ad.index(x, (np.array([0, 2, 2]), np.array([1, 0, 1])))),
                       (3, 2)),
        "matmul": _case(_weighted(ad.matmul), (3, 4), (4, 2)),
        "matmul_vec": _case(_weighted(ad.matmul), (3, 4), (4,)),
        "log_softmax": _case(_weighted(ad.log_softmax), (3, 4)),
        "cross_entropy": _case(lambda z: ad.cross_entropy(z, labels), (3, 4)),
        "conv2d": _case(_weighted(ad.conv2d), (2, 6, 6), (3, 2, 3, 3), (3,)),
        "conv2d_stride2": _case(_weighted(lambda x, k: ad.conv2d(x, k, stride=2)),
                                (2, 2, 6, 6), (3, 2, 3, 3)),
        "upsample_nearest": _case(_weighted(lambda x: ad.upsample(x, 2, "nearest")), (2, 3, 3)),
        "upsample_bilinear": _case(_weighted(lambda x: ad.upsample(x, 2, "bilinear")), (2, 3, 4)),
        "avg_pool": _case(_weighted(lambda x: ad.avg_pool(x, 2)), (2, 4, 6)),
        "instance_norm": _case(_weighted(ad.instance_norm), (2, 4, 4)),
        "tv_iso": _case(ad.tv_iso, (2, 5, 5)),
    }
    return cases


def check(f: Callable[..., ad.Tensor], sample: Callable, trials: int, seed: int,
          h: float = 1e-3, pattern: Callable | None = None) -> tuple[float, float]:
    """Worst relative error over ``trials`` random points, and the skipped fraction.

    With ``pattern`` (arrays -> hashable activation pattern) a coordinate is
    compared only when the pattern is the same at ``x - h``, ``x`` and
    ``x + h``: central differences are meaningless across a kink.
    """
    rng = np.random.default_rng(seed)
    worst = 0.0
    total = skipped = 0
    for _ in range(trials):
        arrays = sample(rng)
        _, grads = ad.value_and_grad(f, *arrays)
        base = pattern(*arrays) if pattern else None
        for i, a in enumerate(arrays):
            args = [np.array(x, dtype=np.float64, copy=True) for x in arrays]
            flat = args[i].reshape(-1)
            numeric = np.zeros(flat.size)
            keep = np.ones(flat.size, dtype=bool)
            for j in range(flat.size):
                orig = flat[j]
                values = []
                for step in (h, -h):
                    flat[j] = orig + step
                    values.append(f(*[ad.Tensor(x) for x in args]).item())
                    if pattern and pattern(*args) != base:
                        keep[j] = False
                flat[j] = orig
                numeric[j] = (values[0] - values[1]) / (2 * h)
            total += flat.size
            skipped += int((~keep).sum())
            if keep.any():
                worst = max(worst, rel_error(grads[i].reshape(-1)[keep], numeric[keep]))
    return worst, skipped / max(total, 1)


def objective_case(size: int = 8, seed: int = 0):
    """Full denoise objective as a function of (y, first conv weight, projection weight)."""
    rng = np.random.default_rng(seed)
    source = rng.uniform(0, 1, (3, size, size))
    problem = DncfProblem("denoise", source, beta=0.3)
    spec = build_skip_net(1, 4, in_ch=3, out_ch=3)
    params = init_params(spec, seed)
    anchor = consistency_anchor(problem, init_y(problem))
    obj = make_objective(problem, spec, anchor)
    names = ("b0.conv0.w", "proj.w")

    def f(y, w0, wp):
        p = params.copy()
        p.entries[names[0]] = w0
        p.entries[names[1]] = wp
        return obj(p, y, 0.05).total

    def pattern(y, w0, wp):
        p = params.copy()
        p.entries[names[0]] = ad.Tensor(w0)
        p.entries[names[1]] = ad.Tensor(wp)
        trace = []
        forward(spec, p, ad.Tensor(y), trace)
        signs = [(t > 0).tobytes() for t in trace[:-1]]
        weights = [np.signbit(p[n].data).tobytes() for n in p.names() if not n.endswith(".b")]
        return tuple(signs + weights)

    def sample(r):
        return [r.uniform(0, 1, source.shape),
                params[names[0]].data + 0.1 * r.standard_normal(params[names[0]].shape),
                params[names[1]].data + 0.1 * r.standard_normal(params[names[1]].shape)]
    return f, sample, pattern


def run_gradcheck(trials: int = 4, seed: int = 0, h: float = 1e-3,
                  objective_trials: int = 3) -> list[GradCheck]:
    """One :class:`GradCheck` per op plus one for the full objective."""
    results = []
    for i, (name, (f, sample)) in enumerate(op_cases().items()):
        t0 = time.perf_counter()
        err, _ = check(f, sample, trials, seed + i, h)
        results.append(GradCheck(name, trials, err, time.perf_counter() - t0))
    f, sample, pattern = objective_case(seed=seed)
    t0 = time.perf_counter()
    err, skipped = check(f, sample, objective_trials, seed + 1000, h, pattern)
    results.append(GradCheck("denoise_objective", objective_trials, err,
                             time.perf_counter() - t0, skipped))
    return results
