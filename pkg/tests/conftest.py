import numpy as np


def finite_difference(f, x, step=1e-4):
    """Central finite differences of a scalar function at array x."""
    g = np.zeros(x.shape, dtype=np.float64)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xp[idx] += step
        xm = x.copy()
        xm[idx] -= step
        g[idx] = (f(xp) - f(xm)) / (2.0 * step)
    return g


def assert_gradient_close(analytic, fd, rtol=1e-4, atol=1e-8):
    analytic = np.asarray(analytic, dtype=np.float64)
    fd = np.asarray(fd, dtype=np.float64)
    scale = np.maximum(np.abs(analytic), np.abs(fd))
    err = np.abs(analytic - fd)
    bad = err > rtol * scale + atol
    assert not bad.any(), (
        f"{int(bad.sum())} gradient coordinates off; worst rel err "
        f"{float((err / np.maximum(scale, 1e-30))[bad].max()):.3e}"
    )
