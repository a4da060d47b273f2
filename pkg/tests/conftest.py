import numpy as np
import pytest

from flowsteer import autodiff as ad


def numeric_grad(f, x, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. array ``x`` (modified in place, restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_error(a, b):
    """Max abs difference relative to the larger gradient magnitude."""
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-12)
    return float(np.abs(a - b).max() / scale)


def grad_check(fn, arrays, h=1e-5, seed=0):
    """Compare tape gradients of ``sum(fn(*tensors) * R)`` with finite differences.

    ``fn`` maps float64 Tensors to a Tensor; R is a fixed random projection so
    every output entry contributes. Returns the worst relative error.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    with ad.precision(np.float64):
        probe = fn(*[ad.Tensor(a) for a in arrays])
        proj = np.random.default_rng(seed).uniform(-1, 1, size=probe.shape)

        def loss_value():
            out = fn(*[ad.Tensor(a) for a in arrays])
            return float(np.sum(out.data * proj))

        params = [ad.Tensor(a, requires_grad=True) for a in arrays]
        with ad.Tape() as tape:
            out = fn(*params)
            loss = ad.tsum(out * ad.Tensor(proj))
        grads = ad.backward(tape, loss, params)
        worst = 0.0
        for a, p in zip(arrays, params):
            num = numeric_grad(loss_value, a, h)
            worst = max(worst, rel_error(grads[p].data, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tiny_sequences(count, frames, seed=0, with_flow=True):
    """Random full-size sequences whose label is the mean horizontal flow / 20."""
    from flowsteer.data import FRAME_HW, DriveSequence

    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        u = rng.uniform(-10, 10, frames)
        flow = np.zeros((frames,) + FRAME_HW + (2,), np.float32)
        flow[..., 0] = u[:, None, None]
        imgs = rng.integers(0, 256, (frames,) + FRAME_HW + (3,), dtype=np.uint8)
        out.append(DriveSequence(f"seq_{i:04d}", imgs, u / 20.0, flow if with_flow else None))
    return out


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE = {}


def record_criterion(number, title, ok, detail=""):
    ACCEPTANCE[number] = (title, bool(ok), detail)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d} {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip())
