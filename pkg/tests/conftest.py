import numpy as np

# Components smaller than this are compared absolutely; central differences
# at step 1e-5 carry ~1e-11 rounding noise that would swamp a pure ratio.
GRAD_FLOOR = 1e-6


def central_difference(f, arrays: dict[str, np.ndarray], step: float = 1e-5) -> dict[str, np.ndarray]:
    """Numerical gradient of scalar ``f()`` w.r.t. every entry of ``arrays`` (perturbed in place)."""
    out = {}
    for name, arr in arrays.items():
        g = np.zeros(arr.shape)
        for j in np.ndindex(arr.shape):
            orig = arr[j]
            arr[j] = orig + step
            fp = f()
            arr[j] = orig - step
            fm = f()
            arr[j] = orig
            g[j] = (fp - fm) / (2 * step)
        out[name] = g
    return out


def max_relative_error(analytic: dict, numeric: dict) -> float:
    worst = 0.0
    for k in numeric:
        a = np.asarray(analytic[k]).reshape(-1)
        n = numeric[k].reshape(-1)
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), GRAD_FLOOR)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)) if a.size else 0.0)
    return worst


# One line per acceptance criterion, echoed in the terminal summary.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
