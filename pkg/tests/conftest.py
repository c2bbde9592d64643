import os

import hypothesis
import numpy as np
import pytest

from retro.autograd import Tape, Tensor, backward
from retro.data import ViewPair
from retro.nn import EncoderConfig, build_assembly, build_network

hypothesis.settings.register_profile("default", deadline=None, max_examples=25,
                                     suppress_health_check=[hypothesis.HealthCheck.too_slow])
hypothesis.settings.register_profile("thorough", deadline=None, max_examples=200)
hypothesis.settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def numeric_grad(fn, inputs, eps=1e-2):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``inputs``.

    Perturbs the f32 arrays in place and evaluates the loss in f64.
    """
    grads = []
    for t in inputs:
        flat = t.data.reshape(-1)
        g = np.zeros(flat.size)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = float(fn().data.astype(np.float64).sum())
            flat[i] = orig - eps
            down = float(fn().data.astype(np.float64).sum())
            flat[i] = orig
            g[i] = (up - down) / (2 * eps)
        grads.append(g.reshape(t.shape))
    return grads


def analytic_grad(fn, inputs):
    for t in inputs:
        t.grad = None
    with Tape() as tape:
        out = fn()
    backward(tape, out)
    return [t.grad.astype(np.float64) for t in inputs]


def relative_error(a, b):
    a, b = np.concatenate([x.ravel() for x in a]), np.concatenate([x.ravel() for x in b])
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-8))


def grad_check(fn, inputs, eps=1e-2):
    """Norm-wise relative error between the tape gradient and central differences."""
    return relative_error(analytic_grad(fn, inputs), numeric_grad(fn, inputs, eps))


def leaf(rng, shape, away_from_zero=0.0):
    """A trainable f32 leaf; optionally keep entries clear of a kink at 0."""
    x = rng.standard_normal(shape)
    if away_from_zero:
        x = np.sign(x) * (np.abs(x) + away_from_zero)
    return Tensor(x, requires_grad=True)


def unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return (x / np.linalg.norm(x, axis=1, keepdims=True)).astype(np.float32)


# --- tiny models ---------------------------------------------------------------

TINY_TEACHER = EncoderConfig(widths=[8, 16, 32])
TINY_STUDENT = EncoderConfig(widths=[4, 8, 12])
TINY_EMBED = 16


def tiny_teacher(seed=0):
    return build_network(TINY_TEACHER, head_hidden=24, seed=seed, embed_dim=TINY_EMBED)


def tiny_assembly(mode, seed=0, teacher=None, head_hidden=6):
    teacher = teacher if teacher is not None or mode == "baseline_moco" else tiny_teacher()
    return build_assembly(mode, TINY_STUDENT, seed, adapter_dim=32, head_hidden=head_hidden,
                          teacher=teacher, embed_dim=TINY_EMBED)


def tiny_views(rng, batch=8, size=16):
    return ViewPair(rng.random((batch, 3, size, size)).astype(np.float32),
                    rng.random((batch, 3, size, size)).astype(np.float32))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# --- acceptance summary --------------------------------------------------------

_CRITERIA = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): acceptance criterion n")
    config.addinivalue_line("markers", "slow: desk-scale training, several minutes")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is None or report.when not in ("setup", "call"):
        return
    n, title = marker.args
    if report.failed or (report.when == "call"):
        prev = _CRITERIA.get(n, (title, True))
        _CRITERIA[n] = (title, prev[1] and report.passed)


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, ok = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {title}")
