"""Per-task objectives, y initialization, output selection and the end-to-end runner.

Every task fits ``f(y)`` to an observation while a consistency term keeps
``y`` near a cheap filtered estimate:

=========  =========================  ==============================
task       data term                  consistency anchor
=========  =========================  ==============================
denoise    mse(f(y), I_s)             G_rho(I_s)
inpaint    mse(M*f(y), M*I_s)         (none)
sr         mse(D(f(y)), I_s)          bicubic(I_s)
flash      mse(f(y), I_nf)            G_rho(I_f + eps)
defend     mse(f(y), I_adv)           G_rho(I_adv) + eps
=========  =========================  ==============================
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import filters
from .convexify import negative_mass, reg_partial
from .networks import (NetworkSpec, ParamSet, build_skip_net, build_small_net, forward,
                       init_params)
from .optimize import OptimConfig, RunRecord, Terms, alternate_optimize

TASKS = ("denoise", "inpaint", "sr", "flash", "defend")
DEFAULT_RHO = {"denoise": 1.5, "defend": 1.5, "flash": 1.0, "inpaint": 1.0, "sr": 0.0}


@dataclass
class DncfProblem:
    task: str
    source: np.ndarray
    aux: np.ndarray | None = None
    mask: np.ndarray | None = None
    beta: float = 0.1
    rho: float | None = None
    sr_factor: int | None = None
    noise_sigma: float = 0.02
    budget: int = 400
    seed: int = 0
    gamma: float | None = None
    norm: str = "l1"
    reg_groups: tuple[str, ...] = ("upper",)
    lambda_tv: float = 0.05

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        self.source = np.asarray(self.source, dtype=np.float64)
        if self.source.ndim == 2:
            self.source = self.source[None]
        if (self.mask is not None) != (self.task == "inpaint"):
            raise ValueError("a mask is required for inpaint and only for inpaint")
        if (self.aux is not None) != (self.task == "flash"):
            raise ValueError("an aux (flash) image is required for flash and only for flash")
        if (self.sr_factor is not None) != (self.task == "sr"):
            raise ValueError("sr_factor is required for sr and only for sr")
        if self.mask is not None:
            m = np.asarray(self.mask, dtype=np.float64)
            m = m.reshape(m.shape[-2:])
            if m.shape != self.source.shape[-2:]:
                raise ValueError(f"mask {m.shape} does not match source {self.source.shape[-2:]}")
            if not np.all((m == 0) | (m == 1)):
                raise ValueError("mask values must be 0 or 1")
            self.mask = m
        if self.aux is not None:
            self.aux = np.asarray(self.aux, dtype=np.float64)
            if self.aux.shape != self.source.shape:
                raise ValueError("flash and no-flash images must have equal shapes")
        if self.beta < 0 or self.noise_sigma < 0:
            raise ValueError("beta and noise_sigma must be nonnegative")
        if self.rho is None:
            self.rho = DEFAULT_RHO[self.task]
        if self.rho < 0:
            raise ValueError("rho must be nonnegative")
        if self.budget < 1:
            raise ValueError("budget must be >= 1")

    @property
    def channels(self) -> int:
        return self.source.shape[-3]


@dataclass
class NetConfig:
    n_blocks: int = 2
    channels: int = 32
    small_convs: int = 3
    small_channels: int = 16
    upsample_mode: str = "bilinear"
    # None picks per task: residual only for super-resolution
    residual: bool | None = None


@dataclass
class CandidateSet:
    candidates: list[np.ndarray]
    scores: list[float] = field(default_factory=list)
    names: tuple[str, ...] = ("y", "f(y)", "f(f(y))")

    @property
    def best(self) -> int:
        best = 0
        for i, s in enumerate(self.scores):
            if s < self.scores[best]:
                best = i
        return best


def _per_image(fn, x: np.ndarray) -> np.ndarray:
    if x.ndim == 4:
        return np.stack([fn(im) for im in x])
    return fn(x)


def _smooth(x: np.ndarray, rho: float) -> np.ndarray:
    return _per_image(lambda im: filters.gaussian_smooth(im, rho), x)


def init_y(problem: DncfProblem) -> np.ndarray:
    """Starting intermediate image; deterministic per ``problem.seed``."""
    rng = np.random.default_rng(problem.seed)
    src = problem.source
    sigma = problem.noise_sigma
    if problem.task in ("denoise", "defend"):
        return _smooth(src, problem.rho) + sigma * rng.standard_normal(src.shape)
    if problem.task == "flash":
        return _smooth(problem.aux + sigma * rng.standard_normal(src.shape), problem.rho)
    if problem.task == "sr":
        return filters.bicubic_resize(src, problem.sr_factor)
    fill = filters.diffusion_fill(src, problem.mask)
    m = problem.mask
    y = m * src + (1 - m) * _smooth(fill, problem.rho)
    return y + sigma * rng.standard_normal(src.shape)


def consistency_anchor(problem: DncfProblem, y0: np.ndarray) -> np.ndarray | None:
    """Target of the ``beta`` term; shares the noise sample drawn by :func:`init_y`."""
    if problem.task == "denoise":
        return _smooth(problem.source, problem.rho)
    if problem.task in ("flash", "defend"):
        return y0
    if problem.task == "sr":
        return filters.bicubic_resize(problem.source, problem.sr_factor)
    return None


def build_network(problem: DncfProblem, net: NetConfig | None = None) -> NetworkSpec:
    net = net or NetConfig()
    c = problem.channels
    if problem.task == "defend":
        return build_small_net(net.small_convs, net.small_channels, in_ch=c)
    residual = problem.task == "sr" if net.residual is None else net.residual
    return build_skip_net(net.n_blocks, net.channels, in_ch=c, out_ch=c,
                          upsample_mode=net.upsample_mode, residual=residual)


def _data_term(problem: DncfProblem, out: ad.Tensor) -> ad.Tensor:
    if problem.task == "inpaint":
        m = problem.mask
        return ad.mse_loss(ad.mul(out, m), m * problem.source)
    if problem.task == "sr":
        return ad.mse_loss(ad.avg_pool(out, problem.sr_factor), problem.source)
    return ad.mse_loss(out, problem.source)


def make_objective(problem: DncfProblem, spec: NetworkSpec, anchor: np.ndarray | None):
    """Closure ``(params, y, gamma) -> Terms`` for :func:`alternate_optimize`."""

    def objective(params: ParamSet, y: ad.Tensor, gamma: float) -> Terms:
        out = forward(spec, params, y)
        data = _data_term(problem, out)
        if anchor is None or problem.beta == 0:
            cons = ad.Tensor(0.0)
        else:
            cons = ad.mse_loss(y, anchor)
        reg = reg_partial(params, problem.reg_groups, problem.norm, gamma)
        total = ad.add(ad.add(data, ad.mul(cons, problem.beta)), reg)
        return Terms(total, data, cons, reg, out)
    return objective


def objective(problem: DncfProblem, spec: NetworkSpec, params: ParamSet, y,
              gamma: float | None = None, anchor: np.ndarray | None = None) -> Terms:
    """Evaluate the task objective at ``y``; the anchor defaults to the noise-free one."""
    if anchor is None and problem.task not in ("inpaint",):
        anchor = consistency_anchor(problem, init_y(problem))
    gamma = problem.gamma if gamma is None else gamma
    return make_objective(problem, spec, anchor)(params, ad.as_tensor(y), gamma or 0.0)


def fidelity(problem: DncfProblem, c: np.ndarray) -> float:
    """The task's data term with the candidate ``c`` in place of ``f(y)``."""
    if problem.task == "inpaint":
        return filters.mse(problem.mask * c, problem.mask * problem.source)
    if problem.task == "sr":
        return filters.mse(ad.avg_pool(ad.Tensor(c), problem.sr_factor).data, problem.source)
    return filters.mse(c, problem.source)


def _tv(c: np.ndarray) -> float:
    return float(np.mean([filters.total_variation(im) for im in c])) if c.ndim == 4 \
        else filters.total_variation(c)


def select_output(problem: DncfProblem, spec: NetworkSpec, params: ParamSet,
                  y_star: np.ndarray) -> tuple[np.ndarray, CandidateSet]:
    """Pick among ``y*, f(y*), f(f(y*))`` by fidelity + ``lambda_tv`` * TV (ties keep the earlier)."""
    params.track(())
    fy = forward(spec, params, y_star).data
    ffy = forward(spec, params, fy).data
    cands = CandidateSet([np.array(y_star), fy, ffy])
    for c in cands.candidates:
        if not np.all(np.isfinite(c)):
            cands.scores.append(np.inf)
        else:
            cands.scores.append(fidelity(problem, c) + problem.lambda_tv * _tv(c))
    best = cands.best
    if not np.isfinite(cands.scores[best]):
        raise FloatingPointError("all output candidates are non-finite")
    return cands.candidates[best], cands


def auto_gamma(problem: DncfProblem, spec: NetworkSpec, anchor):
    """Starting gamma so the regularizer is 1% of the initial data term."""
    obj = make_objective(problem, spec, anchor)

    def gamma0(params: ParamSet, y: np.ndarray) -> float:
        params.track(())
        data = obj(params, ad.Tensor(y), 0.0).data.item()
        names = [n for g in problem.reg_groups for n in params.group(g)]
        neg = negative_mass(params, names)
        return 0.01 * data / neg if neg > 0 else 0.0
    return gamma0


@dataclass
class TaskResult:
    image: np.ndarray
    record: RunRecord
    params: ParamSet
    y: np.ndarray
    spec: NetworkSpec
    candidates: CandidateSet


def run_task(problem: DncfProblem, net: NetConfig | None = None,
             optim: OptimConfig | None = None, select: bool = True) -> TaskResult:
    """Build the network, optimize ``theta`` and ``y``, and choose the output.

    ``select=False`` returns ``f(y*)`` directly instead of the scored choice.
    """
    optim = optim or OptimConfig()
    optim = OptimConfig(**{**optim.__dict__, "budget": problem.budget,
                           "gamma": problem.gamma if problem.gamma is not None else optim.gamma})
    spec = build_network(problem, net)
    params = init_params(spec, problem.seed)
    y0 = init_y(problem)
    anchor = consistency_anchor(problem, y0)
    obj = make_objective(problem, spec, anchor)
    params, y_star, record = alternate_optimize(obj, params, y0, optim,
                                                gamma0=auto_gamma(problem, spec, anchor))
    image, cands = select_output(problem, spec, params, y_star)
    if not select:
        image = cands.candidates[1]
    return TaskResult(np.clip(image, 0.0, 1.0), record, params, y_star, spec, cands)
