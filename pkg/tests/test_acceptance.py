"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict; the lines are printed together in the
terminal summary (see ``conftest.py``) so a plain ``pytest`` run shows them.
Several experiments take minutes on one core.
"""

import time

import numpy as np
import pytest

from dncf import adversarial, filters, icnn_demo, synthetic
from dncf.cli import main
from dncf.convexify import convexity_probe, negative_mass
from dncf.gradcheck import run_gradcheck
from dncf.io import load_image, read_record, save_image
from dncf.networks import build_ficnn, build_small_net, init_params, project_nonnegative
from dncf.optimize import CnscProbe, OptimConfig, minimize_bfgs, subspace_residual
from dncf.tasks import DncfProblem, NetConfig, run_task

VERDICTS: list[str] = []


def verdict(number: int, name: str, ok: bool, detail: str) -> None:
    VERDICTS.append(f"[{'PASS' if ok else 'FAIL'}] {number:2d} {name}: {detail}")
    assert ok, detail


def test_01_gradient_correctness():
    t0 = time.perf_counter()
    results = run_gradcheck(trials=4, seed=0, h=1e-3, objective_trials=10)
    elapsed = time.perf_counter() - t0
    trials = sum(r.trials for r in results)
    worst = max(results, key=lambda r: r.max_rel_error)
    ok = worst.max_rel_error < 1e-4 and trials >= 100 and elapsed < 120
    verdict(1, "gradient correctness", ok,
            f"{len(results)} checks, {trials} trials, worst {worst.name} "
            f"rel err {worst.max_rel_error:.2e}, {elapsed:.1f}s")


def test_02_projected_relu_nets_are_convex():
    worst = {}
    small = build_small_net(3, 8, in_ch=1)
    p = project_nonnegative(init_params(small, 0), "upper")
    worst["conv"] = convexity_probe(small, p, 1000, seed=1, input_shape=(1, 6, 6),
                                    low=-1, high=1).max_violation
    for partial in (False, True):
        spec = build_ficnn(2, (64, 64), partial=partial)
        p = project_nonnegative(init_params(spec, 2), "convex")
        worst["picnn" if partial else "ficnn"] = convexity_probe(spec, p, 1000, seed=3,
                                                    low=-2, high=2).max_violation
    ok = max(worst.values()) <= 1e-9
    verdict(2, "convexity of projected nets", ok,
            ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_03_negative_mass_monotone_in_gamma():
    clean = synthetic.textured_scene(32, 3, 0)
    noisy = synthetic.add_noise(clean, 25 / 255, 1)
    medians = []
    for gamma in (0.0, 1.0, 10.0, 100.0):
        masses = []
        for seed in range(5):
            problem = DncfProblem("denoise", noisy, gamma=gamma, budget=120, seed=seed)
            r = run_task(problem, NetConfig(n_blocks=1, channels=8),
                         OptimConfig(adaptive_gamma=False, snapshot_every=0))
            masses.append(negative_mass(r.params, r.params.group("upper")))
        medians.append(float(np.median(masses)))
    ok = all(b <= a for a, b in zip(medians, medians[1:]))
    verdict(3, "negative mass vs gamma", ok,
            "medians " + " ".join(f"{m:.4g}" for m in medians) + " for gamma 0,1,10,100")


def test_04_adaptive_gamma_from_record(tmp_path):
    clean = synthetic.scene(24, 3, 0)
    src = tmp_path / "noisy.png"
    save_image(synthetic.add_noise(clean, 0.1, 0), src)
    assert main(["denoise", "--in", str(src), "--out", str(tmp_path / "run"), "--gamma", "50",
                 "--iters", "60", "--channels", "8", "--blocks", "1"]) == 0
    rows = [r for r in read_record(tmp_path / "run" / "record.csv") if r["step"] != "restart"]
    triggers = checked = 0
    for cur, nxt in zip(rows, rows[1:]):
        if cur["reg"] > cur["data"]:
            triggers += 1
            checked += nxt["gamma"] == cur["gamma"] / 4
        else:
            checked += nxt["gamma"] == cur["gamma"]
    ok = triggers > 0 and checked == len(rows) - 1
    verdict(4, "adaptive gamma rule", ok,
            f"{triggers} triggers, {checked}/{len(rows) - 1} transitions exact")


def test_05_bfgs_armijo_contracts():
    rng = np.random.default_rng(10)
    q = rng.standard_normal((10, 10))
    a = q @ q.T + 0.1 * np.eye(10)
    c = rng.standard_normal(10)
    res = minimize_bfgs(lambda x: (0.5 * x @ a @ x - c @ x, a @ x - c), rng.standard_normal(10),
                        max_iter=50, gtol=1e-10, dense=True)
    secant = [s.secant_residual for s in res.steps if s.secant_residual is not None]
    armijo = all(s.f_after <= s.f_before + s.alpha * s.xi * s.slope for s in res.steps)
    ok = res.grad_norm < 1e-6 and armijo and secant and max(secant) < 1e-8
    verdict(5, "BFGS/Armijo contracts", ok,
            f"|grad| {res.grad_norm:.1e} after {len(res.steps)} steps, "
            f"max secant residual {max(secant):.1e}, armijo holds: {armijo}")


def test_06_subspace_residual():
    rng = np.random.default_rng(0)
    w = rng.standard_normal((10, 3))
    b = rng.standard_normal(3)
    # two targets lie outside (0, 1), so the loss never reaches a stationary point
    target = np.array([1.1, -0.1, 0.5])

    def fun_grad(y):
        s = 1 / (1 + np.exp(-(w.T @ y + b)))
        resid = s - target
        return float(resid @ resid), w @ (2 * resid * s * (1 - s))

    probe = CnscProbe.from_weights(w)
    res = []
    run = minimize_bfgs(fun_grad, rng.standard_normal(10), max_iter=100, gtol=0.0,
                        callback=lambda it, y, g: res.append(subspace_residual(g, probe)))
    ok = run.iterations == 100 and max(res) < 1e-8
    verdict(6, "subspace residual", ok, f"{len(res)} iterates, max residual {max(res):.1e}")


def test_07_denoising():
    clean = synthetic.textured_scene(128, 3, 0)
    noisy = synthetic.add_noise(clean, 25 / 255, 1)
    t0 = time.perf_counter()
    r = run_task(DncfProblem("denoise", noisy, beta=10.0, lambda_tv=0.1, budget=400, seed=0),
                 optim=OptimConfig(snapshot_every=0))
    elapsed = time.perf_counter() - t0
    out, base = filters.psnr(r.image, clean), filters.psnr(noisy, clean)
    tv = filters.psnr(filters.tv_denoise(noisy, 0.1), clean)
    ok = out >= base + 2 and out >= tv - 0.5 and elapsed < 300
    verdict(7, "denoising", ok,
            f"DNCF {out:.2f} dB, noisy {base:.2f}, TV {tv:.2f}, {elapsed:.0f}s")


def test_08_inpainting():
    ours, fills = [], []
    for seed in range(3):
        clean = synthetic.grating_scene(64, 3, seed)
        mask = synthetic.random_mask((64, 64), 0.25, seed + 10)
        hole = mask == 0
        src = clean * mask
        r = run_task(DncfProblem("inpaint", src, mask=mask, seed=seed),
                     optim=OptimConfig(snapshot_every=0))
        ours.append(np.mean(((r.image - clean) ** 2)[:, hole]))
        fills.append(np.mean(((filters.diffusion_fill(src, mask) - clean) ** 2)[:, hole]))
    ok = np.median(ours) < np.median(fills)
    verdict(8, "inpainting", ok,
            f"median hole MSE {np.median(ours):.5f} vs diffusion fill {np.median(fills):.5f}")


def test_09_super_resolution():
    gains = []
    for seed in range(2):
        clean = synthetic.scene(64, 3, seed)
        low = filters.downsample(clean, 2)
        bicubic = np.clip(filters.bicubic_resize(low, 2), 0, 1)
        r = run_task(DncfProblem("sr", low, sr_factor=2, seed=seed),
                     optim=OptimConfig(snapshot_every=0))
        gains.append(filters.psnr(r.image, clean) - filters.psnr(bicubic, clean))
    ok = min(gains) >= 0
    verdict(9, "super-resolution x2", ok,
            "PSNR gain over bicubic " + ", ".join(f"{g:+.2f} dB" for g in gains))


@pytest.fixture(scope="module")
def batch():
    return adversarial.pattern_dataset(200, seed=77)


def test_10_attack_contracts(trained, batch):
    clf, (x, y) = trained.classifier, batch
    eps = 8 / 256
    acc = {"orig": clf.accuracy(x, y)}
    inside = True
    for kind in ("fgsm", "bim", "pgd", "ffgsm", "cw"):
        adv = adversarial.attack(clf, x, y, adversarial.AttackConfig(kind=kind, epsilon=eps,
                                                                     alpha=2 / 256, n=7))
        in_box = adv.min() >= 0 and adv.max() <= 1
        in_ball = kind == "cw" or np.max(np.abs(adv - x)) <= eps + 1e-12
        inside &= bool(in_box and in_ball)
        acc[kind] = clf.accuracy(adv, y)
    ok = (inside and acc["orig"] >= 0.9 and acc["fgsm"] <= 0.3
          and acc["pgd"] <= 0.1 and acc["bim"] <= 0.1)
    verdict(10, "attack contracts", ok,
            "invariants hold: " + str(inside) + "; accuracy "
            + " ".join(f"{k} {v:.3f}" for k, v in acc.items()))


def test_11_defense_ordering(trained, batch):
    x, y = batch
    rows = adversarial.defense_report(trained.classifier, x, y)
    by = {r.method: r for r in rows}
    cw = by["cw"]
    recovered = (cw.acc_defense - cw.acc_attack) / max(cw.acc_orig - cw.acc_attack, 1e-12)
    ok = (all(r.acc_defense > r.acc_attack for r in rows) and recovered >= 0.5
          and all(r.time < 600 for r in rows))
    verdict(11, "defense ordering", ok,
            " ".join(f"{r.method} {r.acc_attack:.2f}->{r.acc_defense:.2f} ({r.time:.0f}s)"
                     for r in rows) + f"; cw recovery {recovered:.0%}")


def test_12_icnn_demo():
    rows = icnn_demo.compare(("blobs",), icnn_demo.VARIANTS, range(5))
    rows += icnn_demo.compare(("rings",), ("ficnn", "cvxr"), range(5))
    med = icnn_demo.median_table(rows)
    data = icnn_demo.gen_dataset("rings", 200, 0.1, 0)
    model = icnn_demo.train_model("ficnn", data, epochs=300, seed=0)
    nonneg = min(float(model.params[n].data.min()) for n in model.params.group("convex")) >= 0
    blobs = min(v for (d, _), v in med.items() if d == "blobs")
    ok = nonneg and med["rings", "cvxr"] >= med["rings", "ficnn"] and blobs >= 0.95
    verdict(12, "ICNN demo", ok,
            f"ficnn weights nonnegative: {nonneg}; rings cvxr {med['rings', 'cvxr']:.3f} "
            f"vs ficnn {med['rings', 'ficnn']:.3f}; blobs min {blobs:.3f}")


def test_13_reproducible_from_config(tmp_path):
    clean = synthetic.scene(16, 3, 0)
    noisy = tmp_path / "noisy.png"
    save_image(synthetic.add_noise(clean, 0.05, 0), noisy)
    mask = tmp_path / "mask.png"
    save_image(synthetic.random_mask((16, 16), 0.25, 0), mask)
    small = ["--iters", "12", "--channels", "4", "--blocks", "1", "--seed", "3"]
    runs = {"denoise": [], "inpaint": ["--mask", str(mask)], "sr": [],
            "flash": ["--flash", str(noisy)], "defend": []}
    same = {}
    for task, extra in runs.items():
        first, second = tmp_path / task / "a", tmp_path / task / "b"
        assert main([task, "--in", str(noisy), "--out", str(first)] + small + extra) == 0
        assert main([task, "--config", str(first / "config.json"), "--out", str(second)]) == 0
        same[task] = all((first / f).read_bytes() == (second / f).read_bytes()
                         for f in ("result.png", "record.csv"))
    ok = all(same.values())
    verdict(13, "reproducibility", ok, " ".join(f"{k}:{'same' if v else 'DIFF'}"
                                                for k, v in same.items()))
    assert load_image(tmp_path / "sr" / "a" / "result.png").shape[-1] == 32
