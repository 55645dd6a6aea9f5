from __future__ import annotations

import numpy as np
import pytest

from prvr.data import SyntheticSpec, generate_synthetic
from prvr.training import TrainConfig


def tiny_spec(**kw) -> SyntheticSpec:
    base = dict(n_videos=16, n_val_videos=4, n_test_videos=8, frames_per_video=8,
                video_dim=12, text_dim=10, teacher_dim=6, tokens_per_query=4, seed=3)
    base.update(kw)
    return SyntheticSpec(**base)


def tiny_config(**kw) -> TrainConfig:
    base = dict(batch_size=4, hidden_size=8, heads=2, max_epochs=2, patience=5,
                learning_rate=1e-3, max_frames=8)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture
def tiny_ds():
    return generate_synthetic(tiny_spec())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(passed), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
