"""Optimizers and the alternating theta / y inference loop.

``theta`` (network weights) is updated with Adam.  The intermediate image
``y`` is updated with a quasi-Newton step: the direction minimizes the
local quadratic model ``p'd + d'Bd/2`` and the step length is the largest
``b**c`` satisfying the Armijo sufficient-decrease test.  Dense BFGS is
used for small problems, L-BFGS (two-loop recursion) otherwise.
"""

from __future__ import annotations

import copy
import logging
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.linalg

from . import autodiff as ad
from .convexify import GammaSchedule, adapt_gamma
from .networks import ParamSet

logger = logging.getLogger(__name__)

DENSE_LIMIT = 1024


class NumericalAbort(RuntimeError):
    """The optimizer produced non-finite values and ran out of restarts."""


# ---------------------------------------------------------------- Adam

@dataclass
class AdamState:
    lr: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def _arr(x) -> np.ndarray:
    return x.data if isinstance(x, ad.Tensor) else x


def adam_step(state: AdamState, params: dict, grads: dict) -> dict:
    """Bias-corrected Adam update, applied in place to every entry that has a gradient.

    ``params`` maps names to Tensors or arrays; ``grads`` maps a subset of
    those names to gradient arrays of matching shape.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for name, g in grads.items():
        x = _arr(params[name])
        if g.shape != x.shape:
            raise ValueError(f"gradient for {name!r} has shape {g.shape}, parameter {x.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(x)
            state.v[name] = np.zeros_like(x)
        m, v = state.m[name], state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        x -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params


# ---------------------------------------------------------------- BFGS

@dataclass
class BfgsState:
    """Dense Hessian approximation ``B`` or an L-BFGS pair history."""

    dim: int
    dense: bool
    memory: int = 10
    B: np.ndarray | None = None
    s_hist: deque = field(default_factory=deque)
    o_hist: deque = field(default_factory=deque)
    updates: int = 0
    skips: int = 0
    resets: int = 0

    @classmethod
    def new(cls, dim: int, dense: bool | None = None, memory: int = 10) -> BfgsState:
        dense = dim <= DENSE_LIMIT if dense is None else dense
        st = cls(dim=dim, dense=dense, memory=memory)
        if dense:
            st.B = np.eye(dim)
        st.s_hist = deque(maxlen=memory)
        st.o_hist = deque(maxlen=memory)
        return st


def bfgs_direction(state: BfgsState, p: np.ndarray) -> np.ndarray:
    """Minimizer of ``p'd + d'Bd/2``, i.e. ``d = -B^{-1} p`` (or the L-BFGS two-loop product)."""
    p = np.asarray(p, dtype=np.float64).ravel()
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite gradient")
    if state.dense:
        try:
            factor = scipy.linalg.cho_factor(state.B)
        except np.linalg.LinAlgError:
            logger.warning("BFGS matrix lost positive definiteness; resetting to identity")
            state.B = np.eye(state.dim)
            state.resets += 1
            return -p
        return -scipy.linalg.cho_solve(factor, p)
    if not state.s_hist:
        return -p
    q = p.copy()
    alphas = []
    for s, o in zip(reversed(state.s_hist), reversed(state.o_hist)):
        rho = 1.0 / (o @ s)
        a = rho * (s @ q)
        q -= a * o
        alphas.append((rho, a))
    s, o = state.s_hist[-1], state.o_hist[-1]
    q *= (s @ o) / (o @ o)
    for (s, o), (rho, a) in zip(zip(state.s_hist, state.o_hist), reversed(alphas)):
        b = rho * (o @ q)
        q += (a - b) * s
    return -q


def bfgs_update(state: BfgsState, s: np.ndarray, o: np.ndarray) -> BfgsState:
    """Rank-two BFGS update with the curvature guard ``o's > 1e-12 |s||o|``."""
    s = np.asarray(s, dtype=np.float64).ravel()
    o = np.asarray(o, dtype=np.float64).ravel()
    if not np.any(s):
        raise ValueError("bfgs_update needs a nonzero step")
    curv = float(o @ s)
    if curv <= 1e-12 * np.linalg.norm(s) * np.linalg.norm(o):
        state.skips += 1
        return state
    if state.dense:
        Bs = state.B @ s
        B = state.B - np.outer(Bs, Bs) / float(s @ Bs) + np.outer(o, o) / curv
        state.B = 0.5 * (B + B.T)
    else:
        state.s_hist.append(s.copy())
        state.o_hist.append(o.copy())
    state.updates += 1
    return state


@dataclass
class LineSearch:
    alpha: float
    value: float
    ok: bool
    evals: int


def armijo_search(f: Callable[[np.ndarray], float], y: np.ndarray, d: np.ndarray, p: np.ndarray,
                  xi: float = 1e-4, b: float = 0.5, max_backtracks: int = 20,
                  f0: float | None = None) -> LineSearch:
    """Largest ``alpha = b**c`` with ``f(y + alpha d) <= f(y) + alpha xi p'd``.

    Returns ``alpha = 0`` and ``ok=False`` when ``max_backtracks`` trials fail.
    """
    if not (0 < xi < 1 and 0 < b < 1):
        raise ValueError("xi and b must lie in (0, 1)")
    slope = float(np.ravel(p) @ np.ravel(d))
    if not slope < 0:
        raise ValueError(f"d is not a descent direction (p'd = {slope:g})")
    f0 = float(f(y)) if f0 is None else f0
    alpha = 1.0
    for c in range(max_backtracks + 1):
        val = float(f(y + alpha * d))
        if val <= f0 + alpha * xi * slope:
            return LineSearch(alpha, val, True, c + 1)
        alpha *= b
    return LineSearch(0.0, f0, False, max_backtracks + 1)


@dataclass
class StepAudit:
    """Everything needed to re-check one accepted quasi-Newton step."""

    iteration: int
    alpha: float
    f_before: float
    f_after: float
    slope: float
    xi: float
    secant_residual: float | None = None


@dataclass
class BfgsResult:
    x: np.ndarray
    fun: float
    grad_norm: float
    iterations: int
    converged: bool
    steps: list[StepAudit]
    state: BfgsState
    grad_norms: list[float]


def minimize_bfgs(fun_grad: Callable[[np.ndarray], tuple[float, np.ndarray]], x0,
                  max_iter: int = 100, gtol: float = 1e-6, dense: bool | None = None,
                  memory: int = 10, xi: float = 1e-4, b: float = 0.5, max_backtracks: int = 20,
                  project: Callable[[np.ndarray], np.ndarray] | None = None,
                  callback: Callable[[int, np.ndarray, np.ndarray], None] | None = None) -> BfgsResult:
    """Quasi-Newton minimization with Armijo backtracking.

    ``project``, when given, maps each trial point back onto a feasible set
    (used for box constraints); the Armijo test is applied to the
    projected point.
    """
    x = np.array(x0, dtype=np.float64).ravel()
    shape = np.shape(x0)
    project = project or (lambda z: z)

    def f_only(z):
        return fun_grad(z.reshape(shape))[0]

    fx, g = fun_grad(x.reshape(shape))
    g = np.ravel(g).copy()
    state = BfgsState.new(x.size, dense=dense, memory=memory)
    steps: list[StepAudit] = []
    norms = [float(np.linalg.norm(g))]
    if callback:
        callback(0, x.reshape(shape), g.reshape(shape))
    it = 0
    for it in range(1, max_iter + 1):
        if norms[-1] < gtol or not np.any(g):
            # an exactly zero gradient is stationary even when gtol is 0
            return BfgsResult(x.reshape(shape), fx, norms[-1], it - 1, True, steps, state, norms)
        d = bfgs_direction(state, g)
        if g @ d >= 0:
            state.B = np.eye(state.dim) if state.dense else None
            state.s_hist.clear()
            state.o_hist.clear()
            state.resets += 1
            d = -g
        ls = armijo_search(lambda z: f_only(project(z)), x, d, g, xi=xi, b=b,
                           max_backtracks=max_backtracks, f0=fx)
        if not ls.ok:
            break
        x_new = project(x + ls.alpha * d)
        f_new, g_new = fun_grad(x_new.reshape(shape))
        g_new = np.ravel(g_new).copy()
        s, o = x_new - x, g_new - g
        audit = StepAudit(it, ls.alpha, fx, float(f_new), float(g @ d), xi)
        if np.any(s):
            before = state.updates
            bfgs_update(state, s, o)
            if state.dense and state.updates > before:
                audit.secant_residual = float(np.max(np.abs(state.B @ s - o)))
        steps.append(audit)
        x, fx, g = x_new, float(f_new), g_new
        norms.append(float(np.linalg.norm(g)))
        if callback:
            callback(it, x.reshape(shape), g.reshape(shape))
    return BfgsResult(x.reshape(shape), fx, norms[-1], it, norms[-1] < gtol, steps, state, norms)


# ---------------------------------------------------------------- subspace diagnostic

@dataclass
class CnscProbe:
    basis: np.ndarray
    tol: float = 1e-10

    @classmethod
    def from_weights(cls, weight: np.ndarray, tol: float = 1e-10) -> CnscProbe:
        """Orthonormal basis of the column space of a (K, r) last-layer weight matrix."""
        u, sv, _ = np.linalg.svd(np.asarray(weight, dtype=np.float64), full_matrices=False)
        rank = int(np.sum(sv > tol * max(sv.max(initial=0.0), 1.0)))
        return cls(u[:, :rank], tol)


def subspace_residual(p: np.ndarray, probe: CnscProbe) -> float:
    """``|p - Proj(p)| / max(|p|, 1e-30)`` for the probe's subspace."""
    p = np.ravel(p)
    proj = probe.basis @ (probe.basis.T @ p)
    return float(np.linalg.norm(p - proj) / max(np.linalg.norm(p), 1e-30))


# ---------------------------------------------------------------- alternating loop

@dataclass
class Terms:
    """Objective pieces on the tape; ``output`` is the network output ``f(y)``."""

    total: ad.Tensor
    data: ad.Tensor
    consistency: ad.Tensor
    reg: ad.Tensor
    output: ad.Tensor


@dataclass
class OptimConfig:
    budget: int = 400
    phase1_frac: float = 2.0 / 3.0
    lr: float = 0.01
    lr_y: float | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    xi: float = 1e-4
    b: float = 0.5
    max_backtracks: int = 20
    memory: int = 10
    gamma: float | None = None
    gamma_shrink: float = 0.25
    adaptive_gamma: bool = True
    phase2_group: str = "last"
    snapshot_every: int = 200
    tol: float = 1e-6
    patience: int = 50
    max_restarts: int = 2


RECORD_FIELDS = ("iteration", "phase", "step", "data", "consistency", "reg", "total",
                 "gamma", "alpha", "loss_before", "loss_after", "slope", "restart")


@dataclass
class RunRecord:
    rows: list[dict] = field(default_factory=list)
    snapshots: list[tuple[int, np.ndarray]] = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    wall_time: float = 0.0
    restarts: int = 0
    stopped_early: bool = False


Objective = Callable[[ParamSet, ad.Tensor, float], Terms]


def _evaluate(objective: Objective, params: ParamSet, y: np.ndarray, gamma: float,
              theta_names, want_y: bool) -> tuple[Terms, np.ndarray | None, dict]:
    params.track(theta_names)
    yt = ad.Tensor(y, requires_grad=want_y)
    with ad.Tape() as tape:
        terms = objective(params, yt, gamma)
        tape.backward(terms.total)
    grads = {n: params[n].grad if params[n].grad is not None else np.zeros_like(params[n].data)
             for n in theta_names}
    gy = None
    if want_y:
        gy = yt.grad if yt.grad is not None else np.zeros_like(y)
    return terms, gy, grads


def _value(objective: Objective, params: ParamSet, y: np.ndarray, gamma: float) -> float:
    params.track(())
    return objective(params, ad.Tensor(y), gamma).total.item()


def _row(it, phase, step, terms: Terms, gamma, **extra) -> dict:
    row = dict(iteration=it, phase=phase, step=step, data=terms.data.item(),
               consistency=terms.consistency.item(), reg=terms.reg.item(),
               total=terms.total.item(), gamma=gamma, alpha="", loss_before="",
               loss_after="", slope="", restart=0)
    row.update(extra)
    return row


def alternate_optimize(objective: Objective, params: ParamSet, y0: np.ndarray,
                       config: OptimConfig | None = None,
                       gamma0: Callable[[ParamSet, np.ndarray], float] | None = None,
                       ) -> tuple[ParamSet, np.ndarray, RunRecord]:
    """Joint Adam phase followed by alternating L-BFGS(y) / Adam(theta subset) steps.

    ``objective(params, y, gamma)`` must build :class:`Terms` on the active
    tape.  ``gamma0`` computes the starting gamma when ``config.gamma`` is
    None.  Non-finite losses restart the current phase with gamma halved
    and learning rates halved, at most ``config.max_restarts`` times.
    """
    cfg = config or OptimConfig()
    t_start = time.perf_counter()
    params = params.copy()
    y = np.array(y0, dtype=np.float64, copy=True)
    record = RunRecord()
    gamma = cfg.gamma if cfg.gamma is not None else (gamma0(params, y) if gamma0 else 0.0)
    sched = GammaSchedule(gamma, shrink=cfg.gamma_shrink)
    n1 = int(round(cfg.budget * cfg.phase1_frac))
    all_names = params.names()
    sub_names = list(params.group(cfg.phase2_group)) if cfg.phase2_group in params.groups else all_names
    lr_scale = 1.0
    history: list[float] = []

    def converged() -> bool:
        if len(history) <= cfg.patience:
            return False
        old = history[-cfg.patience - 1]
        return abs(history[-1] - old) / max(abs(old), 1e-30) < cfg.tol

    def snapshot(it, terms):
        if cfg.snapshot_every and it % cfg.snapshot_every == 0:
            record.snapshots.append((it, terms.output.data.copy()))

    # theta's Adam moments carry over from the joint phase into the alternating one
    adam_theta = AdamState(lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
    phases = [("joint", 0, n1), ("alternate", n1, cfg.budget)]
    for phase, start, stop in phases:
        attempt = 0
        saved = (params.copy(), y.copy(), sched, len(record.rows), len(record.snapshots),
                 list(history), copy.deepcopy(adam_theta))
        while True:
            try:
                sched = _run_phase(phase, start, stop, objective, params, y, sched, cfg, lr_scale,
                                   all_names, sub_names, record, history, snapshot, converged,
                                   adam_theta)
                break
            except FloatingPointError as exc:
                attempt += 1
                record.restarts += 1
                if attempt > cfg.max_restarts:
                    raise NumericalAbort(f"non-finite loss in {phase} phase after "
                                         f"{cfg.max_restarts} restarts: {exc}") from exc
                p0, y0_, sched0, nrows, nsnaps, hist0, adam0 = saved
                adam_theta = copy.deepcopy(adam0)
                params = p0.copy()
                y = y0_.copy()
                del record.rows[nrows:]
                del record.snapshots[nsnaps:]
                history[:] = hist0
                sched = GammaSchedule(sched0.gamma * 0.5 ** attempt, shrink=sched0.shrink)
                lr_scale = 0.5 ** attempt
                logger.warning("restarting %s phase (attempt %d): %s", phase, attempt, exc)
                record.rows.append(dict(iteration=start, phase=phase, step="restart", data="",
                                        consistency="", reg="", total="", gamma=sched.gamma,
                                        alpha="", loss_before="", loss_after="", slope="",
                                        restart=attempt))
        if record.stopped_early:
            break
    record.wall_time = time.perf_counter() - t_start
    params.track(())
    return params, y, record


def _check(terms: Terms):
    val = terms.total.item()
    if not np.isfinite(val):
        raise FloatingPointError(f"loss = {val}")


def _run_phase(phase, start, stop, objective, params, y, sched, cfg, lr_scale,
               all_names, sub_names, record, history, snapshot, converged,
               adam_theta=None) -> GammaSchedule:
    lr = cfg.lr * lr_scale
    lr_y = (cfg.lr_y if cfg.lr_y is not None else cfg.lr) * lr_scale
    adam_theta = AdamState(lr=lr, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps) \
        if adam_theta is None else adam_theta
    adam_theta.lr = lr
    if phase == "joint":
        adam_y = AdamState(lr=lr_y, beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps)
        for it in range(start, stop):
            terms, gy, grads = _evaluate(objective, params, y, sched.gamma, all_names, True)
            _check(terms)
            record.rows.append(_row(it, phase, "adam", terms, sched.gamma))
            snapshot(it, terms)
            history.append(terms.total.item())
            adam_step(adam_theta, params.entries, grads)
            adam_step(adam_y, {"y": y}, {"y": gy})
            if cfg.adaptive_gamma:
                sched = adapt_gamma(sched, terms.data.item(), terms.reg.item())
            if converged():
                record.stopped_early = True
                break
        return sched

    state = BfgsState.new(y.size, dense=y.size <= DENSE_LIMIT, memory=cfg.memory)
    shape = y.shape
    for it in range(start, stop):
        gamma = sched.gamma
        terms, p, _ = _evaluate(objective, params, y, gamma, (), True)
        _check(terms)
        snapshot(it, terms)
        f0 = terms.total.item()
        p = p.ravel()
        d = bfgs_direction(state, p)
        if p @ d >= 0:
            state = BfgsState.new(y.size, dense=state.dense, memory=cfg.memory)
            d = -p
        alpha, f1, slope = 0.0, f0, float(p @ d)
        if np.any(p):
            ls = armijo_search(lambda z: _value(objective, params, z.reshape(shape), gamma),
                               y.ravel(), d, p, xi=cfg.xi, b=cfg.b,
                               max_backtracks=cfg.max_backtracks, f0=f0)
            alpha, f1 = ls.alpha, ls.value
        if alpha > 0:
            y_new = y + alpha * d.reshape(shape)
            terms_new, p_new, grads = _evaluate(objective, params, y_new, gamma, sub_names, True)
            _check(terms_new)
            bfgs_update(state, y_new.ravel() - y.ravel(), p_new.ravel() - p)
            y[...] = y_new
        else:
            terms_new, _, grads = _evaluate(objective, params, y, gamma, sub_names, False)
        record.rows.append(_row(it, phase, "lbfgs", terms, gamma, alpha=alpha,
                                loss_before=f0, loss_after=f1, slope=slope))
        history.append(f1)
        adam_step(adam_theta, params.entries, grads)
        if cfg.adaptive_gamma:
            sched = adapt_gamma(sched, terms.data.item(), terms.reg.item())
        if converged():
            record.stopped_early = True
            break
    return sched
