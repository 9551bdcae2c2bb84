"""Gradient attacks, a toy pattern classifier and DNCF purification defense."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .optimize import AdamState, OptimConfig, adam_step, minimize_bfgs
from .tasks import DncfProblem, NetConfig, run_task

ATTACKS = ("fgsm", "bim", "pgd", "ffgsm", "cw", "lbfgs")
PATTERN_CLASSES = ("horizontal", "vertical", "checker", "rings")


@dataclass
class Classifier:
    """Differentiable image classifier: ``logits_fn`` maps (N, C, H, W) to (N, K)."""

    logits_fn: Callable[[ad.Tensor], ad.Tensor]
    n_classes: int

    def logits(self, x) -> np.ndarray:
        return self.logits_fn(ad.Tensor(np.asarray(x, dtype=np.float64))).data

    def predict(self, x) -> np.ndarray:
        return np.argmax(self.logits(x), axis=-1)

    def accuracy(self, x, labels) -> float:
        return float(np.mean(self.predict(x) == np.asarray(labels)))


@dataclass(frozen=True)
class AttackConfig:
    kind: str = "fgsm"
    epsilon: float = 8 / 256
    alpha: float = 2 / 256
    n: int = 7
    targeted: int | None = None
    c: float = 1.0
    steps: int = 100
    lr: float = 0.01
    kappa: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACKS:
            raise ValueError(f"unknown attack {self.kind!r}; expected one of {ATTACKS}")
        if self.epsilon < 0 or self.alpha < 0:
            raise ValueError("epsilon and alpha must be >= 0")
        if self.n < 1 or self.steps < 1:
            raise ValueError("n and steps must be >= 1")


# ---------------------------------------------------------------- toy data and classifier

def pattern_dataset(n: int, size: int = 32, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """``n`` low-contrast pattern images in four classes (see ``PATTERN_CLASSES``)."""
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    cy, cx = rng.uniform(size * 0.3, size * 0.7, size=(2, n))
    labels = rng.integers(0, 4, size=n)
    images = np.empty((n, 3, size, size))
    for i, k in enumerate(labels):
        period = rng.uniform(5, 9)
        phase = rng.uniform(0, 2 * np.pi)
        w = 2 * np.pi / period
        if k == 0:
            wave = np.sin(w * yy + phase)
        elif k == 1:
            wave = np.sin(w * xx + phase)
        elif k == 2:
            wave = np.sin(w * xx + phase) * np.sin(w * yy + phase)
        else:
            wave = np.sin(w * np.hypot(yy - cy[i], xx - cx[i]) + phase)
        tint = rng.uniform(0.6, 1.0, size=3)
        base = rng.uniform(0.35, 0.65, size=3)
        contrast = rng.uniform(0.08, 0.16)
        img = base[:, None, None] + contrast * tint[:, None, None] * wave
        img += 0.03 * rng.standard_normal(img.shape)
        images[i] = np.clip(img, 0.0, 1.0)
    return images, labels.astype(int)


def _classifier_shapes(channels: int, size: int, n_classes: int, width: int) -> dict:
    flat = 2 * width * (size // 8) ** 2
    return {
        "conv0.w": (width, channels, 3, 3), "conv0.b": (width,),
        "conv1.w": (2 * width, width, 3, 3), "conv1.b": (2 * width,),
        "conv2.w": (2 * width, 2 * width, 3, 3), "conv2.b": (2 * width,),
        "fc.w": (flat, n_classes), "fc.b": (n_classes,),
    }


def _classifier_logits(params: dict[str, ad.Tensor]) -> Callable[[ad.Tensor], ad.Tensor]:
    def logits(x: ad.Tensor) -> ad.Tensor:
        h = x
        for i in range(3):
            h = ad.relu(ad.conv2d(h, params[f"conv{i}.w"], params[f"conv{i}.b"]))
            h = ad.avg_pool(h, 2)
        h = ad.reshape(h, (h.shape[0], -1))
        return ad.add(ad.matmul(h, params["fc.w"]), params["fc.b"])
    return logits


@dataclass
class TrainedClassifier:
    classifier: Classifier
    params: dict[str, ad.Tensor]
    train_accuracy: float
    test_accuracy: float
    losses: list[float] = field(default_factory=list)


def toy_classifier_train(n_train: int = 1200, n_test: int = 400, size: int = 32, seed: int = 0,
                         epochs: int = 6, batch: int = 50, lr: float = 0.01,
                         width: int = 8) -> TrainedClassifier:
    """Train a three-conv classifier on :func:`pattern_dataset`; deterministic per seed.

    Raises ``RuntimeError`` if held-out accuracy stays below 90%.
    """
    rng = np.random.default_rng(seed)
    x_train, y_train = pattern_dataset(n_train, size, seed)
    x_test, y_test = pattern_dataset(n_test, size, seed + 1000)
    params = {}
    for name, shape in _classifier_shapes(3, size, 4, width).items():
        if name.endswith(".b"):
            params[name] = ad.Tensor(np.zeros(shape), requires_grad=True)
        else:
            fan_in = shape[0] if name == "fc.w" else int(np.prod(shape[1:]))
            params[name] = ad.Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in),
                                     requires_grad=True)
    logits_fn = _classifier_logits(params)
    state = AdamState(lr=lr)
    losses = []
    for _ in range(epochs):
        order = rng.permutation(n_train)
        for start in range(0, n_train, batch):
            idx = order[start:start + batch]
            with ad.Tape() as tape:
                loss = ad.cross_entropy(logits_fn(ad.Tensor(x_train[idx])), y_train[idx])
            for p in params.values():
                p.grad = None
            tape.backward(loss)
            adam_step(state, params, {k: v.grad for k, v in params.items()})
            losses.append(loss.item())
    for p in params.values():
        p.requires_grad = False
        p.grad = None
    clf = Classifier(logits_fn, 4)
    result = TrainedClassifier(clf, params, clf.accuracy(x_train, y_train),
                               clf.accuracy(x_test, y_test), losses)
    if result.test_accuracy < 0.9:
        raise RuntimeError(f"toy classifier reached only {result.test_accuracy:.1%} held-out accuracy")
    return result


# ---------------------------------------------------------------- attacks

def _loss_grad(clf: Classifier, x: np.ndarray, labels) -> np.ndarray:
    """Gradient of the summed cross-entropy w.r.t. the input batch."""
    xt = ad.Tensor(np.array(x, dtype=np.float64), requires_grad=True)
    with ad.Tape() as tape:
        loss = ad.mul(ad.cross_entropy(clf.logits_fn(xt), labels), float(len(x)))
    tape.backward(loss)
    g = xt.grad
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite input gradient")
    return g


def _project(x: np.ndarray, origin: np.ndarray, epsilon: float) -> np.ndarray:
    return np.clip(np.clip(x, origin - epsilon, origin + epsilon), 0.0, 1.0)


def _batch(images) -> tuple[np.ndarray, bool]:
    x = np.asarray(images, dtype=np.float64)
    return (x[None], True) if x.ndim == 3 else (x, False)


def fgsm(clf: Classifier, images, labels, epsilon: float = 8 / 256) -> np.ndarray:
    x, single = _batch(images)
    labels = np.atleast_1d(labels)
    adv = np.clip(x + epsilon * np.sign(_loss_grad(clf, x, labels)), 0.0, 1.0)
    return adv[0] if single else adv


def bim(clf: Classifier, images, labels, epsilon: float = 8 / 256, alpha: float = 2 / 256,
        n: int = 7, start: np.ndarray | None = None,
        trace: list | None = None) -> np.ndarray:
    """``n`` signed steps of size ``alpha``, each projected onto the eps-ball of the original."""
    x, single = _batch(images)
    labels = np.atleast_1d(labels)
    adv = x.copy() if start is None else _project(np.asarray(start, dtype=np.float64).reshape(x.shape),
                                                  x, epsilon)
    for _ in range(n):
        adv = _project(adv + alpha * np.sign(_loss_grad(clf, adv, labels)), x, epsilon)
        if trace is not None:
            trace.append(adv.copy())
    return adv[0] if single else adv


def _random_start(x: np.ndarray, radius: float, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    return np.clip(x + rng.uniform(-radius, radius, size=x.shape), 0.0, 1.0)


def pgd(clf: Classifier, images, labels, epsilon: float = 8 / 256, alpha: float = 2 / 256,
        n: int = 7, seed: int = 0, start_radius: float | None = None,
        trace: list | None = None) -> np.ndarray:
    x, single = _batch(images)
    radius = epsilon if start_radius is None else start_radius
    adv = bim(clf, x, labels, epsilon, alpha, n, start=_random_start(x, radius, seed), trace=trace)
    return adv[0] if single else adv


def ffgsm(clf: Classifier, images, labels, epsilon: float = 8 / 256, alpha: float = 2 / 256,
          seed: int = 0) -> np.ndarray:
    """Random start in the eps-ball, then one projected signed step of size ``alpha``."""
    x, single = _batch(images)
    labels = np.atleast_1d(labels)
    adv = _random_start(x, epsilon, seed)
    adv = _project(adv + alpha * np.sign(_loss_grad(clf, adv, labels)), x, epsilon)
    return adv[0] if single else adv


def _margin(logits: ad.Tensor, labels: np.ndarray, targeted: bool, kappa: float) -> ad.Tensor:
    """Per-sample CW margin, summed.  Targeted: ``max_{j!=t} z_j - z_t``;
    untargeted: ``z_t - max_{j!=t} z_j``; both clamped below at ``-kappa``."""
    z = logits.data
    rows = np.arange(len(labels))
    others = z.copy()
    others[rows, labels] = -np.inf
    runner = np.argmax(others, axis=1)
    z_label = ad.index(logits, (rows, labels))
    z_other = ad.index(logits, (rows, runner))
    m = ad.sub(z_other, z_label) if targeted else ad.sub(z_label, z_other)
    return ad.sum_(ad.relu(ad.add(m, kappa)))


def cw_attack(clf: Classifier, images, labels, target=None, c: float = 1.0, steps: int = 100,
              lr: float = 0.01, kappa: float = 0.0) -> np.ndarray:
    """Adam on ``c * ||x - I||^2 + margin`` with ``x = (tanh(w) + 1) / 2``.

    With ``target`` None the margin pushes away from ``labels``; otherwise
    towards ``target``.
    """
    x0, single = _batch(images)
    targeted = target is not None
    goal = np.atleast_1d(target if targeted else labels).astype(int)
    if goal.size == 1 and len(x0) > 1:
        goal = np.full(len(x0), goal[0])
    w = np.arctanh(np.clip(2 * x0 - 1, -1 + 1e-6, 1 - 1e-6))
    state = AdamState(lr=lr)
    best = x0.copy()
    best_dist = np.full(len(x0), np.inf)
    for _ in range(steps):
        wt = ad.Tensor(w, requires_grad=True)
        with ad.Tape() as tape:
            x = ad.mul(ad.add(ad.tanh(wt), 1.0), 0.5)
            dist = ad.sum_(ad.square(ad.sub(x, x0)))
            logits = clf.logits_fn(x)
            loss = ad.add(ad.mul(dist, c), _margin(logits, goal, targeted, kappa))
        tape.backward(loss)
        # keep the closest iterate that already achieves the attack goal
        pred = np.argmax(logits.data, axis=1)
        success = pred == goal if targeted else pred != goal
        d = np.sum((x.data - x0) ** 2, axis=(1, 2, 3))
        better = success & (d < best_dist)
        best[better] = x.data[better]
        best_dist[better] = d[better]
        adam_step(state, {"w": w}, {"w": wt.grad})
    failed = ~np.isfinite(best_dist)
    final = np.clip((np.tanh(w) + 1) / 2, 0.0, 1.0)
    best[failed] = final[failed]
    return best[0] if single else best


def lbfgs_attack(clf: Classifier, image, label, target=None, c: float = 1.0,
                 steps: int = 50) -> np.ndarray:
    """Box-projected quasi-Newton minimization of ``c * ||x - I||^2 + CE(x, target)``.

    When ``target`` is None the runner-up class of the clean image is used.
    One image at a time.
    """
    x0 = np.asarray(image, dtype=np.float64)
    if target is None:
        z = clf.logits(x0[None])[0]
        z[int(label)] = -np.inf
        target = int(np.argmax(z))

    def fun_grad(x):
        xt = ad.Tensor(x, requires_grad=True)
        with ad.Tape() as tape:
            ce = ad.cross_entropy(clf.logits_fn(ad.reshape(xt, (1,) + x0.shape)), [target])
            loss = ad.add(ad.mul(ad.sum_(ad.square(ad.sub(xt, x0))), c), ce)
        tape.backward(loss)
        return loss.item(), xt.grad

    res = minimize_bfgs(fun_grad, x0, max_iter=steps, gtol=1e-8,
                        project=lambda z: np.clip(z, 0.0, 1.0))
    return np.clip(res.x, 0.0, 1.0)


def attack(clf: Classifier, images, labels, cfg: AttackConfig) -> np.ndarray:
    """Dispatch ``cfg.kind`` on a batch."""
    if cfg.kind == "fgsm":
        return fgsm(clf, images, labels, cfg.epsilon)
    if cfg.kind == "bim":
        return bim(clf, images, labels, cfg.epsilon, cfg.alpha, cfg.n)
    if cfg.kind == "pgd":
        return pgd(clf, images, labels, cfg.epsilon, cfg.alpha, cfg.n, seed=cfg.seed)
    if cfg.kind == "ffgsm":
        return ffgsm(clf, images, labels, cfg.epsilon, cfg.alpha, seed=cfg.seed)
    if cfg.kind == "cw":
        return cw_attack(clf, images, labels, cfg.targeted, cfg.c, cfg.steps, cfg.lr, cfg.kappa)
    x, single = _batch(images)
    labels = np.atleast_1d(labels)
    out = np.stack([lbfgs_attack(clf, im, lab, cfg.targeted, cfg.c, cfg.steps)
                    for im, lab in zip(x, labels)])
    return out[0] if single else out


# ---------------------------------------------------------------- defense

@dataclass(frozen=True)
class DefenseConfig:
    beta: float = 0.1
    rho: float = 1.5
    noise_sigma: float = 0.02
    budget: int = 60
    small_convs: int = 3
    small_channels: int = 16
    lr: float = 0.01


def defend(images, config: DefenseConfig | None = None, seed: int = 0) -> np.ndarray:
    """Purify a single image or a batch with one shared small network.

    Returns ``f(y*)`` clamped to [0, 1].  Different seeds draw different
    consistency noise and therefore give different outputs.
    """
    cfg = config or DefenseConfig()
    problem = DncfProblem("defend", np.asarray(images, dtype=np.float64), beta=cfg.beta,
                          rho=cfg.rho, noise_sigma=cfg.noise_sigma, budget=cfg.budget, seed=seed)
    net = NetConfig(small_convs=cfg.small_convs, small_channels=cfg.small_channels)
    optim = OptimConfig(lr=cfg.lr, snapshot_every=0)
    return run_task(problem, net, optim, select=False).image


@dataclass
class DefenseRow:
    method: str
    time: float
    acc_orig: float
    acc_attack: float
    acc_defense: float


REPORT_COLUMNS = ("method", "time", "acc_orig", "acc_attack", "acc_defense")


def defense_report(clf: Classifier, images, labels, methods=("fgsm", "bim", "pgd", "ffgsm", "cw"),
                   attack_overrides: dict[str, dict] | None = None,
                   defense: DefenseConfig | None = None, seed: int = 0,
                   chunk: int = 50) -> list[DefenseRow]:
    """Clean, attacked and defended accuracy per attack; ``time`` is the defense wall-clock."""
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    overrides = attack_overrides or {}
    acc_orig = clf.accuracy(images, labels)
    rows = []
    for method in methods:
        cfg = AttackConfig(kind=method, seed=seed, **overrides.get(method, {}))
        adv = attack(clf, images, labels, cfg)
        t0 = time.perf_counter()
        purified = np.concatenate([defend(adv[i:i + chunk], defense, seed)
                                   for i in range(0, len(adv), chunk)])
        elapsed = time.perf_counter() - t0
        rows.append(DefenseRow(method, elapsed, acc_orig, clf.accuracy(adv, labels),
                               clf.accuracy(purified, labels)))
    return rows
