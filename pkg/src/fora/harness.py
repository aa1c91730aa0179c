"""Planted-layer task and the experiment protocols built on it.

A planted task takes a random base model and adds rank-``perturb_rank``
perturbations with orthonormal factors to the five target projections of a
known subset of layers. Tokens are uniform; labels are the perturbed teacher's
argmax. Every batch is a pure function of ``(task seed, split, index)``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .adapter import init_adapters, trainable_param_count
from .config import Config
from .diagnostics import kl_rows, report, svg_lines
from .exceptions import ConfigError, NumericalError
from .fisher import SelectionSet, score_layers, select_topk
from .linalg import qr_thin, rng_stream
from .model import MODULES, BaseWeights, Batch, ModelConfig, init_base_weights, loss, predict_logits
from .optim import TrainConfig, train

CSV_SCHEMA = "fora-csv/1"


@dataclass
class PlantedTask:
    config: ModelConfig
    teacher: BaseWeights
    student_base: BaseWeights
    planted: tuple[int, ...]
    seed: int
    perturb_rank: int
    perturb_scale: float

    def batch(self, split: str, index: int, size: int) -> Batch:
        rng = rng_stream(self.seed, "data", split, index)
        tokens = rng.integers(0, self.config.vocab, (size, self.config.seq_len))
        targets = predict_logits(self.teacher, None, tokens).argmax(axis=-1)
        return Batch(tokens, targets)

    def batches(self, split: str, n: int, size: int) -> list[Batch]:
        return [self.batch(split, i, size) for i in range(n)]

    def train_stream(self, size: int, seed: int = 0):
        """Step -> batch map; ``seed`` reshuffles the stream across runs."""
        cache: dict = {}

        def get(step: int) -> Batch:
            if step not in cache:
                cache.clear()
                cache[step] = self.batch(f"train-{seed}", step, size)
            return cache[step]

        return get

    def teacher_kl(self, batches) -> float:
        """Mean ``KL(teacher || base)`` over the given batches."""
        vals = [kl_rows(predict_logits(self.teacher, None, b.tokens),
                        predict_logits(self.student_base, None, b.tokens)) for b in batches]
        return float(np.mean(np.concatenate([v.ravel() for v in vals])))


def make_planted_task(
    config: ModelConfig,
    k_planted: int,
    perturb_rank: int,
    perturb_scale: float,
    seed: int,
    proj_gain: float = 1.0,
    head_gain: float = 4.0,
) -> PlantedTask:
    """Base model plus ``U V^T`` perturbations on exactly the planted layers.

    Each target projection ``W`` of a planted layer becomes
    ``W + perturb_scale * ||W||_2 * U V^T`` with ``U, V`` orthonormal, so the
    scale is relative to the projection it perturbs.
    """
    if not 1 <= k_planted <= config.n_layers:
        raise ConfigError(f"k_planted={k_planted} must be in [1, {config.n_layers}]")
    if not 1 <= perturb_rank <= min(config.d_model, config.d_ff):
        raise ConfigError(f"perturb_rank={perturb_rank} is out of range")
    base = init_base_weights(config, seed, proj_gain, head_gain)
    pick = rng_stream(seed, "planted-layers")
    planted = tuple(sorted(int(l) for l in pick.choice(config.n_layers, k_planted, replace=False)))
    teacher = base.copy()
    if perturb_scale != 0:
        for layer in planted:
            for module in MODULES:
                rng = rng_stream(seed, "perturb", layer, module)
                d_out, d_in = config.module_shape(module)
                u = qr_thin(rng.standard_normal((d_out, perturb_rank))).q
                v = qr_thin(rng.standard_normal((d_in, perturb_rank))).q
                w = base.layers[layer][module]
                teacher.layers[layer][module] = w + perturb_scale * np.linalg.norm(w, 2) * (u @ v.T)
    return PlantedTask(config, teacher, base, planted, seed, perturb_rank, perturb_scale)


def task_from_config(cfg: Config) -> PlantedTask:
    t = cfg.task
    return make_planted_task(cfg.model, t.k_planted, t.perturb_rank, t.perturb_scale, t.seed,
                             t.proj_gain, t.head_gain)


def calibrate_scale(config: ModelConfig, target_kl: float = 0.5, seed: int = 0, k_planted: int = 4,
                    perturb_rank: int = 4, head_gain: float = 4.0, n_batches: int = 2, tol: float = 0.02) -> float:
    """Bisect ``perturb_scale`` so the teacher/base KL is close to ``target_kl``."""
    lo, hi = 0.0, 4.0
    mid = 0.5 * (lo + hi)
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        task = make_planted_task(config, k_planted, perturb_rank, mid, seed, head_gain=head_gain)
        kl = task.teacher_kl(task.batches("calib-scale", n_batches, 16))
        if abs(kl - target_kl) < tol:
            break
        lo, hi = (mid, hi) if kl < target_kl else (lo, mid)
    return mid


# ---- arms -------------------------------------------------------------------


@dataclass(frozen=True)
class Arm:
    """One training configuration: how layers are picked, rank, constraint."""

    name: str
    selection: str  # "fisher", "all", "random"
    k: int
    r: int
    constrained: bool

    def param_count(self, config: ModelConfig) -> int:
        return trainable_param_count(config, self.k, self.r)


@dataclass
class ArmResult:
    arm: str
    seed: int
    k: int
    r: int
    constrained: bool
    layers: tuple
    params: int
    init_loss: float = math.nan
    final_loss: float = math.nan
    train_loss: float = math.nan
    erank_ratio: float = math.nan
    tail_ratio: float = math.nan
    dw_frob: float = math.nan
    kl: float = math.nan
    drift_max: float = math.nan
    status: str = "ok"
    losses: list = field(default_factory=list, repr=False)

    def row(self) -> dict:
        return {
            "arm": self.arm,
            "seed": self.seed,
            "k": self.k,
            "r": self.r,
            "constrained": int(self.constrained),
            "layers": " ".join(str(l) for l in self.layers),
            "params": self.params,
            "init_loss": self.init_loss,
            "final_loss": self.final_loss,
            "train_loss": self.train_loss,
            "erank_ratio": self.erank_ratio,
            "tail_ratio": self.tail_ratio,
            "dw_frob": self.dw_frob,
            "kl": self.kl,
            "drift_max": self.drift_max,
            "status": self.status,
        }


class Runner:
    """Runs arms on one planted task, memoizing identical runs.

    Two arms that resolve to the same ``(layers, r, constrained, seed)`` share
    one training run, so e.g. FG-LoRA at ``k = L`` and LoRA-all are computed
    once.
    """

    def __init__(self, task: PlantedTask, cfg: Config):
        self.task = task
        self.cfg = cfg
        ex = cfg.experiment
        self.calib = task.batches("calib", ex.n_calib, ex.calib_batch_size)
        self.eval = task.batches("eval", ex.n_eval, ex.eval_batch_size)
        self._scores = None
        self._cache: dict = {}

    @property
    def scores(self):
        if self._scores is None:
            ex = self.cfg.experiment
            self._scores = score_layers(self.task.student_base, self.calib, ex.n_calib,
                                        ex.fisher_variant, self.task.seed)
        return self._scores

    def fisher_selection(self, k: int) -> SelectionSet:
        ex = self.cfg.experiment
        return select_topk(self.scores, k, n_batches=ex.n_calib, seed=self.task.seed,
                           variant=ex.fisher_variant)

    def random_selection(self, k: int, seed: int) -> SelectionSet:
        # its own stream, independent of anything the Fisher pass draws
        rng = rng_stream(seed, "random-k", k)
        layers = rng.choice(self.task.config.n_layers, k, replace=False)
        return SelectionSet(tuple(int(l) for l in layers), k, seed=seed, variant="random")

    def layers_for(self, arm: Arm, seed: int) -> tuple[int, ...]:
        n = self.task.config.n_layers
        if arm.selection == "fisher":
            return self.fisher_selection(arm.k).layers
        if arm.selection == "all":
            if arm.k != n:
                raise ConfigError(f"arm {arm.name!r}: selection 'all' needs k = {n}")
            return tuple(range(n))
        if arm.selection == "random":
            return self.random_selection(arm.k, seed).layers
        raise ConfigError(f"unknown selection rule {arm.selection!r}")

    def eval_loss(self, adapters=None) -> float:
        base = self.task.student_base
        return float(np.mean([loss(predict_logits(base, adapters, b.tokens), b.targets) for b in self.eval]))

    def run(self, arm: Arm, seed: int) -> ArmResult:
        layers = self.layers_for(arm, seed)
        key = (layers, arm.r, arm.constrained, seed)
        if key not in self._cache:
            self._cache[key] = self._train(arm, layers, seed)
        res = self._cache[key]
        out = ArmResult(**{**res.__dict__, "arm": arm.name, "k": arm.k})
        return out

    def _train(self, arm: Arm, layers, seed: int) -> ArmResult:
        tc = self.cfg.train
        # the rank-halved arm keeps the scaling factor alpha/r fixed
        alpha = tc.alpha_lora * arm.r / tc.r
        cfg = TrainConfig(**{**tc.to_dict(), "r": arm.r, "alpha_lora": alpha, "k": arm.k, "seed": seed})
        base = self.task.student_base
        adapters = init_adapters(base.config, layers, arm.r, alpha, arm.constrained, seed, tc.b_init)
        result = ArmResult(arm.name, seed, arm.k, arm.r, arm.constrained, tuple(layers),
                           trainable_param_count(base.config, layers, arm.r))
        result.init_loss = self.eval_loss(adapters)
        try:
            trained = train(base, adapters, self.task.train_stream(tc.batch_size, seed), cfg)
        except NumericalError as exc:
            result.status = f"numerical-abort@{exc.step}"
            return result
        result.losses = trained.losses.tolist()
        rep = report(base, trained.adapters, self.eval, drift_max=trained.max_drift)
        result.final_loss = self.eval_loss(trained.adapters)
        tail = max(1, len(result.losses) // 10)
        result.train_loss = float(np.mean(result.losses[-tail:])) if result.losses else result.init_loss
        result.erank_ratio = rep.mean_erank_ratio
        result.tail_ratio = float(np.mean([s.tail_ratio for s in rep.slots]))
        result.dw_frob = rep.dw_frob_total
        result.kl = rep.kl_drift
        result.drift_max = rep.drift_max
        return result


def ablation_arms(cfg: Config) -> list[Arm]:
    n, k, r = cfg.model.n_layers, cfg.train.k, cfg.train.r
    return [
        Arm("LoRA-all", "all", n, r, False),
        Arm("FG-LoRA", "fisher", k, r, False),
        Arm("Stiefel-LoRA", "all", n, r, True),
        Arm("FoRA", "fisher", k, r, True),
    ]


def matched_arms(cfg: Config) -> list[Arm]:
    n, k, r = cfg.model.n_layers, cfg.train.k, cfg.train.r
    if r % 2:
        raise ConfigError(f"matched-budget protocol needs an even rank, got r={r}")
    return [
        Arm("LoRA-full", "all", n, r, False),
        Arm("LoRA-half-rank", "all", n, r // 2, False),
        Arm("Random-K", "random", k, r, False),
        Arm("FG-LoRA", "fisher", k, r, False),
        Arm("FoRA", "fisher", k, r, True),
    ]


def check_matched_budget(config: ModelConfig, arms: list[Arm]) -> int:
    """Return the common parameter count of the reduced arms or raise."""
    counts = {a.name: a.param_count(config) for a in arms}
    if len(set(counts.values())) != 1:
        raise ConfigError(f"reduced arms are not parameter-matched: {counts}")
    return next(iter(counts.values()))


def run_ablation_2x2(task: PlantedTask, cfg: Config, seeds, runner: Runner | None = None) -> list[ArmResult]:
    runner = runner or Runner(task, cfg)
    return [runner.run(arm, s) for arm in ablation_arms(cfg) for s in seeds]


def run_k_sweep(task: PlantedTask, cfg: Config, k_values, seeds, runner: Runner | None = None) -> list[ArmResult]:
    runner = runner or Runner(task, cfg)
    n, r = cfg.model.n_layers, cfg.train.r
    for k in k_values:
        if not 1 <= k <= n:
            raise ConfigError(f"k={k} is out of range [1, {n}]")
    rows = []
    for k in k_values:
        for arm in (Arm("FG-LoRA", "fisher", k, r, False), Arm("FoRA", "fisher", k, r, True)):
            rows.extend(runner.run(arm, s) for s in seeds)
    return rows


def run_matched_budget(task: PlantedTask, cfg: Config, seeds, runner: Runner | None = None) -> list[ArmResult]:
    arms = matched_arms(cfg)
    check_matched_budget(cfg.model, arms[1:])
    runner = runner or Runner(task, cfg)
    return [runner.run(arm, s) for arm in arms for s in seeds]


# ---- summaries and output ---------------------------------------------------


def median_by(rows: list[ArmResult], field_name: str, key=lambda r: r.arm) -> dict:
    groups: dict = {}
    for row in rows:
        groups.setdefault(key(row), []).append(getattr(row, field_name))
    return {k: float(np.median(v)) for k, v in groups.items()}


def summarize(rows: list[ArmResult], key=lambda r: r.arm) -> list[dict]:
    """Mean and std per group of final loss, erank ratio and KL."""
    groups: dict = {}
    for row in rows:
        groups.setdefault(key(row), []).append(row)
    out = []
    for name, rs in groups.items():
        entry = {"group": name, "params": rs[0].params, "n": len(rs),
                 "flagged": sum(r.status != "ok" for r in rs)}
        for f in ("final_loss", "erank_ratio", "kl"):
            vals = np.array([getattr(r, f) for r in rs])
            entry[f + "_mean"] = float(np.mean(vals))
            entry[f + "_std"] = float(np.std(vals))
        out.append(entry)
    return out


def source_version() -> str:
    """``v<version>-g<hash>`` where the hash covers the package sources."""
    h = hashlib.sha256()
    for path in sorted(Path(__file__).parent.glob("*.py")):
        h.update(path.name.encode())
        h.update(path.read_bytes())
    return f"v{__version__}-g{h.hexdigest()[:7]}"


def format_value(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def to_csv(rows: list[dict], cfg: Config | None = None, seeds=None, extra: dict | None = None) -> str:
    """CSV text with ``#``-prefixed provenance lines ahead of the header row."""
    buf = io.StringIO()
    buf.write(f"# schema={CSV_SCHEMA}\n")
    if cfg is not None:
        buf.write(f"# config_sha256={cfg.digest()}\n")
    if seeds is not None:
        buf.write(f"# seeds={','.join(str(s) for s in seeds)}\n")
    buf.write(f"# version={source_version()}\n")
    for k, v in (extra or {}).items():
        buf.write(f"# {k}={v}\n")
    if rows:
        w = csv.writer(buf, lineterminator="\n")
        cols = list(rows[0])
        w.writerow(cols)
        for row in rows:
            w.writerow([format_value(row[c]) for c in cols])
    return buf.getvalue()


def read_csv(text: str) -> tuple[dict, list[dict]]:
    """Inverse of :func:`to_csv`: ``(provenance, rows)`` with string values."""
    meta, body = {}, []
    for line in text.splitlines():
        if line.startswith("# "):
            k, _, v = line[2:].partition("=")
            meta[k] = v
        else:
            body.append(line)
    return meta, list(csv.DictReader(body))


def sweep_svg(rows: list[ArmResult]) -> str:
    series = {}
    for arm in ("FG-LoRA", "FoRA"):
        med = median_by([r for r in rows if r.arm == arm], "final_loss", key=lambda r: r.k)
        ks = sorted(med)
        series[arm] = (ks, [med[k] for k in ks])
    return svg_lines(series, "final loss vs K", "K", "eval loss")


def any_flagged(rows: list[ArmResult]) -> bool:
    return any(r.status != "ok" for r in rows)

