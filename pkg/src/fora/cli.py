"""Command-line entry point: ``fora <command> --config FILE --seed N --out DIR``.

Exit codes: 0 success, 2 configuration error, 3 numerical abort.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .adapter import init_adapters, merge_into_base, trainable_param_count
from .checkpoint import load_adapters, save_adapters, save_weights, weights_digest
from .config import Config, load_config
from .diagnostics import cross_layer_gradient_correlation, report, svg_lines
from .exceptions import ConfigError, NumericalError
from .fisher import rank_layers
from .harness import (
    Runner,
    any_flagged,
    run_ablation_2x2,
    run_k_sweep,
    run_matched_budget,
    summarize,
    sweep_svg,
    task_from_config,
    to_csv,
)
from .model import predict_logits
from .optim import StepRecord, train

log = logging.getLogger("fora")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
ARMS = {
    "fora": ("fisher", True),
    "fg-lora": ("fisher", False),
    "lora-all": ("all", False),
    "stiefel-lora": ("all", True),
}


def _write(out: Path, name: str, text: str) -> Path:
    path = out / name
    path.write_text(text)
    log.info("wrote %s", path)
    return path


def _rows(results) -> list[dict]:
    return [r.row() for r in results]


def _layers_for_arm(runner: Runner, arm: str, cfg: Config):
    rule, constrained = ARMS[arm]
    if rule == "fisher":
        return runner.fisher_selection(cfg.train.k), constrained
    return tuple(range(cfg.model.n_layers)), constrained


def cmd_gen_task(cfg: Config, out: Path, args) -> int:
    task = task_from_config(cfg)
    save_weights(out / "base.bin", task.student_base)
    save_weights(out / "teacher.bin", task.teacher)
    ex = cfg.experiment
    kl = task.teacher_kl(task.batches("eval", ex.n_eval, ex.eval_batch_size))
    rows = [{"layer": l, "planted": int(l in task.planted)} for l in range(cfg.model.n_layers)]
    _write(out, "task.csv", to_csv(rows, cfg, [task.seed], {"teacher_kl": repr(kl)}))
    print(f"planted layers {list(task.planted)}; teacher/base KL {kl:.4f}")
    return EXIT_OK


def cmd_score(cfg: Config, out: Path, args) -> int:
    task = task_from_config(cfg)
    runner = Runner(task, cfg)
    scores = runner.scores
    sel = runner.fisher_selection(cfg.train.k)
    ranks = rank_layers(scores)
    rows = [
        {"layer": s.layer, "score": s.score, "rank": ranks[s.layer], "selected": int(s.layer in sel)}
        for s in scores
    ]
    extra = {"n_batches": cfg.experiment.n_calib, "variant": cfg.experiment.fisher_variant, "k": cfg.train.k}
    _write(out, "scores.csv", to_csv(rows, cfg, [task.seed], extra))
    print(f"selected layers {list(sel.layers)}")
    if args.correlation:
        mean_off, max_off, ratio = cross_layer_gradient_correlation(task.student_base, runner.calib)
        corr = [{"mean_offdiag": mean_off, "max_offdiag": max_off, "ratio": ratio}]
        _write(out, "correlation.csv", to_csv(corr, cfg, [task.seed]))
    return EXIT_OK


def _train_arm(cfg: Config, arm: str, out: Path | None, timing: bool):
    task = task_from_config(cfg)
    runner = Runner(task, cfg)
    layers, constrained = _layers_for_arm(runner, arm, cfg)
    tc = cfg.train
    base = task.student_base
    adapters = init_adapters(base.config, layers, tc.r, tc.alpha_lora, constrained, tc.seed, tc.b_init)
    before = weights_digest(base)
    records: list[StepRecord] = []
    try:
        result = train(base, adapters, task.train_stream(tc.batch_size, tc.seed), tc, records.append)
    finally:
        if out is not None and records:
            rows = [{"step": r.step, "loss": r.loss, "drift_max": r.drift_max, "retracted": int(r.retracted)}
                    for r in records]
            _write(out, "train.csv", to_csv(rows, cfg, [tc.seed], {"arm": arm}))
            if timing:
                _write(out, "timing.csv", "step,wall_ms\n" + "".join(f"{r.step},{r.wall_ms:.3f}\n" for r in records))
    if weights_digest(base) != before:
        raise RuntimeError("base weights changed during training")
    return task, runner, layers, result


def cmd_train(cfg: Config, out: Path, args) -> int:
    task, runner, layers, result = _train_arm(cfg, args.arm, out, args.timing)
    tc = cfg.train
    save_adapters(out / "adapters.bin", cfg.model, result.adapters, layers,
                  {**tc.to_dict(), "arm": args.arm, "config_sha256": cfg.digest()})
    final = runner.eval_loss(result.adapters)
    params = trainable_param_count(cfg.model, layers, tc.r)
    print(f"arm {args.arm}: layers {list(getattr(layers, 'layers', layers))}, params {params}, "
          f"eval loss {runner.eval_loss():.4f} -> {final:.4f}")
    return EXIT_OK


def cmd_diag(cfg: Config, out: Path, args) -> int:
    task = task_from_config(cfg)
    runner = Runner(task, cfg)
    if args.adapters:
        adapters, _ = load_adapters(args.adapters)
        drift = None
    else:
        _, runner, _, result = _train_arm(cfg, args.arm, None, False)
        adapters, drift = result.adapters, result.max_drift
    base = task.student_base
    rep = report(base, adapters, runner.eval, drift_max=drift)
    merged = merge_into_base(base, adapters)
    gap = max(float(np.max(np.abs(predict_logits(merged, None, b.tokens) - predict_logits(base, adapters, b.tokens))))
              for b in runner.eval)
    summary = {**rep.summary(), "merge_max_abs_logit_gap": gap}
    _write(out, "report.csv", to_csv([summary], cfg, [cfg.train.seed]))
    _write(out, "slots.csv", rep.slots_csv())
    _write(out, "spectrum.csv", rep.spectrum_csv())
    series = {f"{s.layer}.{s.module}": (list(range(1, len(s.spectrum) + 1)), list(s.spectrum))
              for s in rep.slots if s.spectrum[0] > 0}
    if series:
        _write(out, "spectrum.svg", svg_lines(series, "adapter spectra", "index", "sigma", logy=True))
    print(f"mean erank ratio {rep.mean_erank_ratio:.4f}, KL drift {rep.kl_drift:.4f}, "
          f"max orthogonality drift {rep.drift_max:.2e}")
    return EXIT_OK


def _protocol(cfg: Config, out: Path, name: str, results) -> int:
    seeds = cfg.experiment.seeds
    _write(out, f"{name}.csv", to_csv(_rows(results), cfg, seeds, {"task_seed": cfg.task.seed}))
    key = (lambda r: f"{r.arm}@k={r.k}") if name == "sweep_k" else (lambda r: r.arm)
    _write(out, f"{name}_summary.csv", to_csv(summarize(results, key), cfg, seeds))
    for row in summarize(results, key):
        print(f"{row['group']:>22}  params {row['params']:>6}  loss {row['final_loss_mean']:.4f}"
              f" +/- {row['final_loss_std']:.4f}  erank {row['erank_ratio_mean']:.3f}  KL {row['kl_mean']:.3f}")
    if any_flagged(results):
        log.error("some runs aborted; their rows are flagged in the status column")
        return EXIT_NUMERICAL
    return EXIT_OK


def cmd_ablate(cfg: Config, out: Path, args) -> int:
    task = task_from_config(cfg)
    return _protocol(cfg, out, "ablation", run_ablation_2x2(task, cfg, cfg.experiment.seeds))


def cmd_sweep_k(cfg: Config, out: Path, args) -> int:
    task = task_from_config(cfg)
    results = run_k_sweep(task, cfg, cfg.experiment.k_values, cfg.experiment.seeds)
    code = _protocol(cfg, out, "sweep_k", results)
    if not any_flagged(results):
        _write(out, "sweep_k.svg", sweep_svg(results))
    return code


def cmd_matched(cfg: Config, out: Path, args) -> int:
    task = task_from_config(cfg)
    return _protocol(cfg, out, "matched", run_matched_budget(task, cfg, cfg.experiment.seeds))


COMMANDS = {
    "gen-task": (cmd_gen_task, "build the planted-layer task and save base/teacher weights"),
    "score": (cmd_score, "Fisher layer scores and top-K selection"),
    "train": (cmd_train, "train one arm and save the adapter checkpoint"),
    "diag": (cmd_diag, "effective rank, spectra, weight change and KL drift"),
    "ablate": (cmd_ablate, "2x2 ablation: Fisher selection x Stiefel constraint"),
    "sweep-k": (cmd_sweep_k, "FG-LoRA and FoRA over a range of K"),
    "matched": (cmd_matched, "parameter-matched budget comparison"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fora", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", type=Path, default=None, help="JSON config file (desk defaults if omitted)")
        p.add_argument("--seed", type=int, default=None, help="overrides the task and training seed")
        p.add_argument("--out", type=Path, default=Path("out"), help="output directory")
        if name in ("train", "diag"):
            p.add_argument("--arm", choices=sorted(ARMS), default="fora")
        if name == "train":
            p.add_argument("--timing", action="store_true", help="also write per-step wall times")
        if name == "diag":
            p.add_argument("--adapters", type=Path, default=None, help="adapter checkpoint to analyse")
        if name == "score":
            p.add_argument("--correlation", action="store_true", help="also measure cross-layer correlation")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg = cfg.with_seed(args.seed)
        args.out.mkdir(parents=True, exist_ok=True)
        start = time.perf_counter()
        code = COMMANDS[args.command][0](cfg, args.out, args)
        log.info("%s finished in %.1fs", args.command, time.perf_counter() - start)
        return code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        step = f" at step {exc.step}" if getattr(exc, "step", None) is not None else ""
        print(f"numerical abort{step}: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
