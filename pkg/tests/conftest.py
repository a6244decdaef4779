import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from gpilqg.loop import load_task  # noqa: E402


def tiny_cartpole(**kw):
    """Short balancing problem near upright: fast enough for unit tests."""
    cfg = load_task("cartpole-1").replace(
        task="tiny",
        x0=[0.0, 0.0, float(np.pi - 0.3), 0.0],
        horizon=40,
        rollouts=2,
        eval_rollouts=4,
        max_iters=2,
        gp={"cap": 80, "restarts": 2, "max_iter": 60},
        solver={"max_iter": 40, "tol": 1.0e-6},
    )
    return cfg.replace(**kw) if kw else cfg


@pytest.fixture
def tiny():
    return tiny_cartpole()
