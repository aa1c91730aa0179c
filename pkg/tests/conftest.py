import time

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from fora.config import config_from_dict, load_config
from fora.harness import Runner, run_ablation_2x2, run_k_sweep, run_matched_budget, task_from_config
from fora.model import ModelConfig, init_base_weights

settings.register_profile(
    "default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

TINY = ModelConfig(n_layers=2, d_model=8, n_heads=2, d_ff=12, vocab=11, seq_len=5)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_config():
    return TINY


@pytest.fixture
def tiny_base():
    return init_base_weights(TINY, seed=3)


@pytest.fixture
def small_cfg():
    """A fast end-to-end config for CLI and harness plumbing tests."""
    return config_from_dict(
        {
            "model": {"n_layers": 4, "d_model": 16, "n_heads": 2, "d_ff": 24, "vocab": 13, "seq_len": 8},
            "task": {"k_planted": 2, "perturb_rank": 2, "perturb_scale": 0.6},
            "train": {"steps": 6, "batch_size": 4, "k": 2, "r": 4, "alpha_lora": 8},
            "experiment": {"seeds": [0, 1], "n_calib": 4, "calib_batch_size": 4, "n_eval": 2,
                           "eval_batch_size": 4, "k_values": [1, 2, 4]},
        }
    )


def stiefel(rng, d, r):
    q, _ = np.linalg.qr(rng.standard_normal((d, r)))
    return q


class DeskProtocols:
    """The three desk-scale protocols on the default planted task, run once per session."""

    def __init__(self):
        start = time.perf_counter()
        self.cfg = load_config(None)
        self.task = task_from_config(self.cfg)
        self.runner = Runner(self.task, self.cfg)
        seeds = self.cfg.experiment.seeds
        self.ablation = run_ablation_2x2(self.task, self.cfg, seeds, self.runner)
        self.matched = run_matched_budget(self.task, self.cfg, seeds, self.runner)
        self.sweep = run_k_sweep(self.task, self.cfg, self.cfg.experiment.k_values, seeds, self.runner)
        self.seconds = time.perf_counter() - start


@pytest.fixture(scope="session")
def desk():
    return DeskProtocols()


VERDICTS: dict[int, str] = {}


def record_verdict(n: int, ok: bool, detail: str) -> bool:
    line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
    VERDICTS[n] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for n in sorted(VERDICTS):
            terminalreporter.write_line(VERDICTS[n])
