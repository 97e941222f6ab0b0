import numpy as np
import pytest


def bilinear_point(fmap, x, y):
    """Scalar align-corners bilinear read of a (C, H, W) map with border clamping."""
    C, H, W = fmap.shape
    px = min(max((x + 1) / 2 * (W - 1), 0.0), W - 1.0)
    py = min(max((y + 1) / 2 * (H - 1), 0.0), H - 1.0)
    x0, y0 = int(np.floor(px)), int(np.floor(py))
    x1, y1 = min(x0 + 1, W - 1), min(y0 + 1, H - 1)
    ax, ay = px - x0, py - y0
    out = np.zeros(C)
    for c in range(C):
        out[c] = ((1 - ax) * (1 - ay) * fmap[c, y0, x0] + ax * (1 - ay) * fmap[c, y0, x1]
                  + (1 - ax) * ay * fmap[c, y1, x0] + ax * ay * fmap[c, y1, x1])
    return out


def softmax_list(row):
    m = max(row)
    e = [np.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


# ---------------------------------------------------------------- acceptance reporting

class _Criterion:
    def __init__(self, lines, number, title):
        self.lines, self.number, self.title, self.detail = lines, number, title, ""

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        ok = exc_type is None
        detail = self.detail if ok or not exc else f"{self.detail} {exc_type.__name__}: {exc}".strip()
        line = f"criterion {self.number} {'PASS' if ok else 'FAIL'}  {self.title}: {detail}"
        print(line)
        self.lines.append(line)
        return False


def pytest_configure(config):
    config.acceptance_lines = []


@pytest.fixture
def criterion(request):
    """``with criterion(n, title) as c: ...`` records one pass/fail line; set ``c.detail`` for the numbers."""
    return lambda number, title: _Criterion(request.config.acceptance_lines, number, title)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
