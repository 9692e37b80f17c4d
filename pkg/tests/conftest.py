import numpy as np
import pytest

from stemsplat.scene_io import GaussianField, View


def look_down_z(width=64, height=48, f=50.0, view_id="v0"):
    """Camera at the origin looking along +z (identity pose)."""
    return View(view_id, f, f, width / 2, height / 2, width, height, np.eye(3), np.zeros(3))


def random_rotations(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_field(rng, n, depth=(3.0, 8.0), spread=1.0, scale=(0.02, 0.3), alpha=(0.05, 0.95)):
    means = np.column_stack([rng.uniform(-spread, spread, n), rng.uniform(-spread, spread, n),
                             rng.uniform(*depth, n)])
    scales = rng.uniform(*scale, (n, 3))
    return GaussianField.from_activated(means, scales, random_rotations(rng, n), rng.uniform(*alpha, n))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# one "[ACn] PASS|FAIL ..." line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE = []


def verdict(n, ok, detail):
    line = f"[AC{n}] {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE.append((n, line))
    print(line)
    assert ok, line


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
