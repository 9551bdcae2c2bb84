"""Soft nonnegativity regularizers, the adaptive gamma rule and a convexity probe."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import autodiff as ad
from .networks import NetworkSpec, ParamSet, forward, is_bias


@dataclass(frozen=True)
class GammaSchedule:
    gamma: float
    shrink: float = 0.25
    floor: float = 0.0

    def __post_init__(self):
        if self.gamma < 0 or self.floor < 0:
            raise ValueError("gamma and floor must be nonnegative")
        if not 0 < self.shrink < 1:
            raise ValueError("shrink must lie in (0, 1)")


def _weights(params: ParamSet, names) -> list[str]:
    return [n for n in names if not is_bias(n)]


def _norm(x: ad.Tensor, norm: str) -> ad.Tensor:
    neg = ad.negative_part(x)
    if norm == "l1":
        return ad.sum_(neg)
    if norm == "l2":
        return ad.l2_norm(neg)
    raise ValueError(f"unknown norm {norm!r}")


def _flat(params: ParamSet, names) -> ad.Tensor:
    parts = [ad.reshape(params[n], (-1,)) for n in names]
    return parts[0] if len(parts) == 1 else ad.concat(parts)


def reg_full(params: ParamSet, norm: str = "l1", gamma: float = 1.0) -> ad.Tensor:
    """``gamma * ||max(-theta, 0)||`` over every weight entry (biases exempt)."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    names = _weights(params, params.names())
    if not names:
        return ad.Tensor(0.0)
    return ad.mul(_norm(_flat(params, names), norm), gamma)


def reg_partial(params: ParamSet, groups, norm: str = "l1", gamma: float = 1.0) -> ad.Tensor:
    """Sum over ``groups`` of ``gamma * ||max(-theta[group], 0)||``."""
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    total = ad.Tensor(0.0)
    for g in groups:
        names = _weights(params, params.group(g))
        if names:
            total = ad.add(total, _norm(_flat(params, names), norm))
    return ad.mul(total, gamma)


def negative_mass(params: ParamSet, names=None) -> float:
    """``||max(-theta, 0)||_1`` over the weight entries in ``names`` (all by default)."""
    names = _weights(params, params.names() if names is None else names)
    return float(sum(np.maximum(-params[n].data, 0.0).sum() for n in names))


def adapt_gamma(sched: GammaSchedule, mse_term: float, reg_term: float) -> GammaSchedule:
    """Shrink gamma by ``sched.shrink`` whenever the regularizer exceeds the fit term."""
    if mse_term < 0 or reg_term < 0:
        raise ValueError("terms must be nonnegative")
    if reg_term > mse_term:
        return replace(sched, gamma=max(sched.gamma * sched.shrink, sched.floor))
    return sched


def initial_gamma(mse_term: float, unscaled_reg: float, ratio: float = 0.01) -> float:
    """Gamma that makes the regularizer ``ratio`` times the fit term at the start."""
    if unscaled_reg <= 0:
        return 0.0
    return ratio * mse_term / unscaled_reg


@dataclass
class ProbeResult:
    max_violation: float
    mean_violation: float
    per_output: np.ndarray


def convexity_probe(spec: NetworkSpec, params: ParamSet, n_pairs: int = 1000, seed: int = 0,
                    input_shape: tuple[int, ...] | None = None,
                    low: float = 0.0, high: float = 1.0) -> ProbeResult:
    """Midpoint-convexity violations ``F((a+b)/2) - F(a)/2 - F(b)/2`` over random pairs.

    Conv nets draw ``a, b`` uniformly in ``[low, high]`` with ``input_shape``
    (C, H, W).  FICNN specs hold a random data point fixed per pair and
    vary the label proposal.  Only positive parts count as violations.
    """
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = np.random.default_rng(seed)
    if spec.kind == "ficnn":
        data = rng.uniform(-3, 3, size=(n_pairs, spec.in_channels))
        a = rng.uniform(low, high, size=(n_pairs, spec.out_channels))
        b = rng.uniform(low, high, size=(n_pairs, spec.out_channels))
        fa = forward(spec, params, (data, a)).data
        fb = forward(spec, params, (data, b)).data
        fm = forward(spec, params, (data, 0.5 * (a + b))).data
        gap = (fm - 0.5 * fa - 0.5 * fb)[:, None]
    else:
        if input_shape is None:
            raise ValueError("input_shape is required for convolutional specs")
        gaps = []
        batch = 64
        for start in range(0, n_pairs, batch):
            m = min(batch, n_pairs - start)
            a = rng.uniform(low, high, size=(m,) + tuple(input_shape))
            b = rng.uniform(low, high, size=(m,) + tuple(input_shape))
            fa = forward(spec, params, a).data
            fb = forward(spec, params, b).data
            fm = forward(spec, params, 0.5 * (a + b)).data
            gaps.append((fm - 0.5 * fa - 0.5 * fb).reshape(m, -1))
        gap = np.concatenate(gaps)
    pos = np.maximum(gap, 0.0)
    return ProbeResult(float(pos.max()), float(pos.mean()), pos.max(axis=0))
