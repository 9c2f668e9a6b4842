import numpy as np
import pytest

from lorapro import DampingPolicy, LoraLayer

# exact Gram inversion for hand-value tests; damped behavior has its own tests
EXACT = DampingPolicy(rel_epsilon=0.0)


@pytest.fixture
def unit_instance():
    """2x2 rank-1 layer with unit scaling and a fixed full gradient.

    Small enough that every downstream quantity is hand-checkable:
    raw grads [[1,2]] / [[1],[3]], projected pair [[1,2]] / [[0],[3]],
    equivalent gradient [[1,2],[3,0]], optimal X -0.5, certificate -14.
    """
    layer = LoraLayer(
        w0=np.zeros((2, 2)),
        b=np.array([[1.0], [0.0]]),
        a=np.array([[1.0, 0.0]]),
        alpha=1.0,
        rank=1,
        scaling_mode="lora",
    )
    g = np.array([[1.0, 2.0], [3.0, 4.0]])
    return layer, g
