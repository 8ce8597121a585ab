import numpy as np
import pytest

from sfprompt.model import ModelConfig


def grads_close(a, b, rtol=1e-4, atol=1e-8):
    """Elementwise |a-b| <= atol + rtol*max(|a|,|b|)."""
    a = np.asarray(a)
    b = np.asarray(b)
    return bool((np.abs(a - b) <= atol + rtol * np.maximum(np.abs(a), np.abs(b))).all())


def assert_grads_close(a, b, rtol=1e-4, atol=1e-8, label=""):
    a = np.asarray(a)
    b = np.asarray(b)
    diff = np.abs(a - b)
    tol = atol + rtol * np.maximum(np.abs(a), np.abs(b))
    worst = (diff - tol).max()
    assert (diff <= tol).all(), f"{label}: gradient mismatch, worst overshoot {worst:.3e}"


@pytest.fixture
def tiny_config():
    return ModelConfig(seq_len=4, d_model=8, n_layers=2, n_classes=3, input_dim=4)


@pytest.fixture
def small_config():
    return ModelConfig(seq_len=8, d_model=16, n_layers=4, n_classes=4, input_dim=8)
