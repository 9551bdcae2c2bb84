"""Command-line entry point: ``dncf <subcommand> [options]``.

Exit codes: 0 success, 1 input error, 2 numeric abort (or failed gradcheck).
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import adversarial, filters, icnn_demo
from .gradcheck import run_gradcheck
from .io import (ConfigError, ImageIOError, RunConfig, config_from_dict, load_config, load_image,
                 load_mask, report_metrics, save_config, save_image, write_json, write_record,
                 write_rows)
from .optimize import NumericalAbort, OptimConfig
from .synthetic import add_noise, flash_pair, random_mask, scene
from .tasks import DncfProblem, NetConfig, run_task

logger = logging.getLogger("dncf")

RESTORE_TASKS = ("denoise", "inpaint", "sr", "flash", "defend")
EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2


@dataclass
class AttackRunConfig:
    method: str = "fgsm"
    eps: float = 8 / 256
    alpha: float = 2 / 256
    steps: int = 7
    c: float = 1.0
    samples: int = 200
    seed: int = 0
    out: str = "out"


@dataclass
class DefendReportConfig:
    methods: tuple[str, ...] = ("fgsm", "bim", "pgd", "ffgsm", "cw")
    samples: int = 200
    seed: int = 0
    beta: float = 0.1
    iters: int = 60
    out: str = "out"


@dataclass
class IcnnRunConfig:
    datasets: tuple[str, ...] = icnn_demo.DATASETS
    variants: tuple[str, ...] = icnn_demo.VARIANTS
    seeds: int = 5
    n: int = 200
    noise: float = 0.1
    epochs: int = 2000
    lr: float = 0.01
    gamma: float | None = None
    seed: int = 0
    out: str = "out"


# ---------------------------------------------------------------- config resolution

def _resolve(cls, args, flag_map: dict[str, str]):
    """Defaults < $DNCF_SEED < --config file < explicit flags."""
    data = {}
    env_seed = os.environ.get("DNCF_SEED")
    if env_seed and "seed" in {f.name for f in dataclasses.fields(cls)}:
        try:
            data["seed"] = int(env_seed)
        except ValueError as exc:
            raise ConfigError(f"DNCF_SEED must be an integer, got {env_seed!r}") from exc
    if getattr(args, "config", None):
        data.update(dataclasses.asdict(load_config(cls, args.config)))
    for flag, field_name in flag_map.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[field_name] = value
    return config_from_dict(cls, data)


def _abs(path: str | None) -> str | None:
    return None if path is None else str(Path(path).resolve())


# ---------------------------------------------------------------- restoration tasks

def run_restoration(cfg: RunConfig) -> dict:
    """Run one restoration job and write the fixed output layout into ``cfg.out``."""
    if cfg.task not in RESTORE_TASKS:
        raise ConfigError(f"unknown task {cfg.task!r}")
    if cfg.source is None:
        raise ConfigError("an input image (--in) is required")
    source = load_image(cfg.source)
    clean = load_image(cfg.clean) if cfg.clean else None
    mask = load_mask(cfg.mask) if cfg.mask else None
    aux = load_image(cfg.flash) if cfg.flash else None
    sr_factor = cfg.sr_factor if cfg.task == "sr" else None
    if cfg.task == "sr" and sr_factor is None:
        sr_factor = 2
    problem = DncfProblem(cfg.task, source, aux=aux, mask=mask, beta=cfg.beta, rho=cfg.rho,
                          sr_factor=sr_factor, noise_sigma=cfg.noise_sigma, budget=cfg.iters,
                          seed=cfg.seed, gamma=cfg.gamma, norm=cfg.norm,
                          reg_groups=tuple(cfg.reg_groups), lambda_tv=cfg.lambda_tv)
    net = NetConfig(cfg.n_blocks, cfg.channels, cfg.small_convs, cfg.small_channels,
                    cfg.upsample_mode)
    optim = OptimConfig(lr=cfg.lr, lr_y=cfg.lr_y, xi=cfg.xi, b=cfg.b, memory=cfg.memory,
                        adaptive_gamma=cfg.adaptive_gamma, snapshot_every=cfg.snapshot_every)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    t0 = time.perf_counter()
    result = run_task(problem, net, optim, select=cfg.task != "defend")
    elapsed = time.perf_counter() - t0
    save_image(result.image, out / "result.png")
    write_record(result.record, out / "record.csv")
    snaps = []
    for it, img in result.record.snapshots:
        name = f"snap_{it:06d}.png"
        save_image(np.clip(img, 0, 1), out / name)
        snaps.append(name)
    extra = {"task": cfg.task, "iterations": len(result.record.rows),
             "restarts": result.record.restarts, "stopped_early": result.record.stopped_early,
             "selected": result.candidates.names[result.candidates.best],
             "candidate_scores": dict(zip(result.candidates.names,
                                          map(float, result.candidates.scores))),
             "snapshots": snaps}
    if clean is not None:
        extra["baselines"] = _baselines(cfg.task, problem, clean)
    return report_metrics(result.image, clean, elapsed, out / "metrics.json", extra)


def _baselines(task: str, problem: DncfProblem, clean: np.ndarray) -> dict:
    """Reference-method scores on the same input, for side-by-side reporting."""
    src = problem.source
    if task == "sr":
        up = np.clip(filters.bicubic_resize(src, problem.sr_factor), 0, 1)
        return {"bicubic_psnr": filters.psnr(up, clean)} if up.shape == clean.shape else {}
    if src.shape != clean.shape:
        return {}
    out = {"input_psnr": filters.psnr(src, clean)}
    if task in ("denoise", "defend"):
        out["tv_psnr"] = filters.psnr(filters.tv_denoise(src), clean)
    elif task == "inpaint":
        hole = problem.mask == 0
        fill = filters.diffusion_fill(src, problem.mask)
        out["fill_hole_mse"] = float(np.mean(((fill - clean) ** 2)[:, hole]))
    return out


def _restore_config(args) -> RunConfig:
    flags = {"in_path": "source", "clean": "clean", "mask": "mask", "flash": "flash",
             "out": "out", "beta": "beta", "gamma": "gamma", "iters": "iters", "seed": "seed",
             "rho": "rho", "sr_factor": "sr_factor", "lambda_tv": "lambda_tv",
             "channels": "channels", "blocks": "n_blocks", "lr": "lr",
             "snapshot_every": "snapshot_every", "noise_sigma": "noise_sigma"}
    cfg = _resolve(RunConfig, args, flags)
    cfg = dataclasses.replace(cfg, task=args.command, source=_abs(cfg.source),
                              clean=_abs(cfg.clean), mask=_abs(cfg.mask), flash=_abs(cfg.flash))
    return cfg


def _batch_job(path: str, out_root: str, task: str) -> tuple[str, int, str]:
    try:
        cfg = load_config(RunConfig, path)
        here = Path(path).parent
        paths = {k: str(here / v) for k in ("source", "clean", "mask", "flash")
                 if (v := getattr(cfg, k)) is not None}
        cfg = dataclasses.replace(cfg, task=task, out=str(Path(out_root) / Path(path).stem),
                                  **paths)
        run_restoration(cfg)
        return path, EXIT_OK, ""
    except NumericalAbort as exc:
        return path, EXIT_NUMERIC, str(exc)
    except (OSError, ValueError) as exc:
        return path, EXIT_INPUT, str(exc)


def _run_batch(args) -> int:
    batch = Path(args.batch)
    if not batch.is_dir():
        raise FileNotFoundError(f"batch directory not found: {batch}")
    jobs = sorted(str(p) for p in batch.glob("*.json"))
    if not jobs:
        raise ConfigError(f"no *.json configs in {batch}")
    out_root = args.out or str(batch / "runs")
    workers = args.workers or os.cpu_count() or 1
    worst = EXIT_OK
    with ProcessPoolExecutor(max_workers=workers) as pool:
        for path, code, msg in pool.map(_batch_job, jobs, [out_root] * len(jobs),
                                        [args.command] * len(jobs)):
            print(f"{path}: {'ok' if code == EXIT_OK else msg}")
            worst = max(worst, code)
    return worst


def cmd_restore(args) -> int:
    if args.batch:
        return _run_batch(args)
    if args.command == "defend" and args.in_path is None and not args.config:
        return cmd_defend_report(args)
    cfg = _restore_config(args)
    metrics = run_restoration(cfg)
    shown = {k: metrics[k] for k in ("psnr", "mse", "tv", "wall_clock_s") if k in metrics}
    print(" ".join(f"{k}={v:.6g}" for k, v in shown.items()), f"-> {cfg.out}")
    return EXIT_OK


# ---------------------------------------------------------------- attack / defense

def cmd_attack(args) -> int:
    cfg = _resolve(AttackRunConfig, args, {"method": "method", "eps": "eps", "alpha": "alpha",
                                           "steps": "steps", "samples": "samples", "seed": "seed",
                                           "out": "out", "c": "c"})
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    trained = adversarial.toy_classifier_train(seed=cfg.seed)
    clf = trained.classifier
    x, y = adversarial.pattern_dataset(cfg.samples, seed=cfg.seed + 77)
    acfg = adversarial.AttackConfig(kind=cfg.method, epsilon=cfg.eps, alpha=cfg.alpha,
                                    n=cfg.steps, c=cfg.c, seed=cfg.seed)
    t0 = time.perf_counter()
    adv = adversarial.attack(clf, x, y, acfg)
    elapsed = time.perf_counter() - t0
    pred_clean, pred_adv = clf.predict(x), clf.predict(adv)
    linf = np.max(np.abs(adv - x), axis=(1, 2, 3))
    rows = [{"index": i, "label": int(y[i]), "pred_clean": int(pred_clean[i]),
             "pred_attack": int(pred_adv[i]), "linf": float(linf[i])} for i in range(len(x))]
    write_rows(rows, ("index", "label", "pred_clean", "pred_attack", "linf"), out / "record.csv")
    save_image(adv[0], out / "result.png")
    metrics = {"method": cfg.method, "acc_orig": float(np.mean(pred_clean == y)),
               "acc_attack": float(np.mean(pred_adv == y)), "max_linf": float(linf.max()),
               "wall_clock_s": elapsed, "classifier_test_accuracy": trained.test_accuracy,
               "better": {"acc_attack": "↓", "wall_clock_s": "↓"}}
    write_json(metrics, out / "metrics.json")
    print(f"{cfg.method}: accuracy {metrics['acc_orig']:.3f} -> {metrics['acc_attack']:.3f} "
          f"(max Linf {metrics['max_linf']:.5f}) -> {cfg.out}")
    return EXIT_OK


def cmd_defend_report(args) -> int:
    cfg = _resolve(DefendReportConfig, args, {"methods": "methods", "samples": "samples",
                                              "seed": "seed", "beta": "beta", "iters": "iters",
                                              "out": "out"})
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    clf = adversarial.toy_classifier_train(seed=cfg.seed).classifier
    x, y = adversarial.pattern_dataset(cfg.samples, seed=cfg.seed + 77)
    defense = adversarial.DefenseConfig(beta=cfg.beta, budget=cfg.iters)
    rows = adversarial.defense_report(clf, x, y, cfg.methods, defense=defense, seed=cfg.seed)
    # timings vary between runs, so they stay out of record.csv
    write_rows(rows, tuple(c for c in adversarial.REPORT_COLUMNS if c != "time"),
               out / "record.csv")
    write_rows(rows, adversarial.REPORT_COLUMNS, out / "report.csv")
    save_image(adversarial.defend(x[:1], defense, cfg.seed)[0], out / "result.png")
    write_json({"rows": [dataclasses.asdict(r) for r in rows],
                "better": {"acc_defense": "↑", "acc_attack": "↓", "time": "↓"}},
               out / "metrics.json")
    for r in rows:
        print(f"{r.method:6s} orig {r.acc_orig:.3f} attack {r.acc_attack:.3f} "
              f"defense {r.acc_defense:.3f} ({r.time:.1f}s)")
    return EXIT_OK


# ---------------------------------------------------------------- icnn demo, gradcheck, bench

def cmd_icnn(args) -> int:
    cfg = _resolve(IcnnRunConfig, args, {"datasets": "datasets", "variants": "variants",
                                         "seeds": "seeds", "n": "n", "epochs": "epochs",
                                         "gamma": "gamma", "seed": "seed", "out": "out"})
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    t0 = time.perf_counter()
    seeds = range(cfg.seed, cfg.seed + cfg.seeds)
    rows = icnn_demo.compare(cfg.datasets, cfg.variants, seeds, cfg.n, cfg.noise, cfg.epochs,
                             cfg.lr, out_dir=out / "grids")
    cols = ("dataset", "variant", "seed", "accuracy", "negative_mass", "final_loss")
    write_rows(rows, cols, out / "record.csv")
    table = icnn_demo.median_table(rows)
    write_rows([{"dataset": d, "variant": v, "median_accuracy": a} for (d, v), a in table.items()],
               ("dataset", "variant", "median_accuracy"), out / "report.csv")
    first = f"{cfg.datasets[-1]}_{cfg.variants[-1]}.png"
    (out / "result.png").write_bytes((out / "grids" / first).read_bytes())
    write_json({"median_accuracy": {f"{d}/{v}": a for (d, v), a in table.items()},
                "wall_clock_s": time.perf_counter() - t0,
                "better": {"median_accuracy": "↑"}}, out / "metrics.json")
    for (d, v), a in table.items():
        print(f"{d:6s} {v:6s} median accuracy {a:.3f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    results = run_gradcheck(trials=args.trials, seed=args.seed or 0)
    for r in results:
        status = "PASS" if r.passed() else "FAIL"
        note = f" (kink-crossing stencils skipped: {r.skipped_fraction:.1%})" if r.skipped_fraction else ""
        print(f"{status} {r.name:20s} trials={r.trials} max_rel_err={r.max_rel_error:.2e}{note}")
    total = sum(r.trials for r in results)
    print(f"{total} trials in {time.perf_counter() - t0:.1f}s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_rows(results, ("name", "trials", "max_rel_error", "seconds", "skipped_fraction"),
                   out / "record.csv")
    return EXIT_OK if all(r.passed() for r in results) else EXIT_NUMERIC


def bench(size: int = 32, iters: int = 20) -> dict[str, float]:
    """Wall-clock seconds per task on fixed synthetic inputs."""
    clean = scene(size, 3, 0)
    flash, no_flash, _ = flash_pair(size, 0)
    problems = {
        "denoise": DncfProblem("denoise", add_noise(clean, 25 / 255, 1), budget=iters),
        "inpaint": DncfProblem("inpaint", clean * random_mask((size, size), 0.25, 0),
                               mask=random_mask((size, size), 0.25, 0), budget=iters),
        "sr": DncfProblem("sr", filters.downsample(clean, 2), sr_factor=2, budget=iters),
        "flash": DncfProblem("flash", no_flash, aux=flash, budget=iters),
        "defend": DncfProblem("defend", clean, budget=iters),
    }
    times = {}
    for name, problem in problems.items():
        t0 = time.perf_counter()
        run_task(problem, optim=OptimConfig(snapshot_every=0), select=name != "defend")
        times[name] = time.perf_counter() - t0
    return times


def cmd_bench(args) -> int:
    size = args.size
    iters = args.iters or 20
    times = bench(size, iters)
    for name, t in times.items():
        print(f"{name:8s} {size}x{size} {iters} iters: {t:.2f}s")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_json({"size": size, "iters": iters, "seconds": times}, out / "metrics.json")
    return EXIT_OK


# ---------------------------------------------------------------- parser

def _common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="JSON config file; flags override its values")
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--iters", type=int)
    p.add_argument("--seed", type=int, help="defaults to $DNCF_SEED, then 0")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dncf", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for task in RESTORE_TASKS:
        p = sub.add_parser(task, help=f"{task} one image")
        _common(p)
        p.add_argument("--in", dest="in_path", help="input image (PNG)")
        p.add_argument("--clean", help="ground-truth image for metrics")
        p.add_argument("--rho", type=float)
        p.add_argument("--lambda-tv", dest="lambda_tv", type=float)
        p.add_argument("--noise-sigma", dest="noise_sigma", type=float)
        p.add_argument("--channels", type=int)
        p.add_argument("--blocks", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--snapshot-every", dest="snapshot_every", type=int)
        p.add_argument("--batch", help="directory of JSON configs to run in a worker pool")
        p.add_argument("--workers", type=int)
        if task == "inpaint":
            p.add_argument("--mask", help="mask PNG; pixels > 127 are known")
        if task == "flash":
            p.add_argument("--flash", help="flash image (PNG); --in is the no-flash image")
        if task == "sr":
            p.add_argument("--sr-factor", dest="sr_factor", type=int)
        if task == "defend":
            p.add_argument("--methods", nargs="+", choices=adversarial.ATTACKS,
                           help="report mode (no --in): attacks to defend against")
            p.add_argument("--samples", type=int)
    p = sub.add_parser("attack", help="attack the toy classifier")
    _common(p)
    p.add_argument("--method", choices=adversarial.ATTACKS)
    p.add_argument("--eps", type=float)
    p.add_argument("--alpha", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--c", type=float)
    p.add_argument("--samples", type=int)
    p = sub.add_parser("icnn-demo", help="FICNN / PICNN / CVXR-Net 2-D comparison")
    _common(p)
    p.add_argument("--datasets", nargs="+", choices=icnn_demo.DATASETS)
    p.add_argument("--variants", nargs="+", choices=icnn_demo.VARIANTS)
    p.add_argument("--seeds", type=int, help="number of seeds")
    p.add_argument("--n", type=int, help="points per dataset")
    p.add_argument("--epochs", type=int)
    p = sub.add_parser("gradcheck", help="autodiff vs finite differences")
    _common(p)
    p.add_argument("--trials", type=int, default=4)
    p = sub.add_parser("bench", help="wall-clock per task")
    _common(p)
    p.add_argument("--size", type=int, default=32)
    return parser


HANDLERS = {"attack": cmd_attack, "icnn-demo": cmd_icnn, "gradcheck": cmd_gradcheck,
            "bench": cmd_bench}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = HANDLERS.get(args.command, cmd_restore)
    try:
        return handler(args)
    except NumericalAbort as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FileNotFoundError, ImageIOError, ConfigError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
