import math

import numpy as np
import pytest

from regsynth.volume import DisplacementField, Volume, gaussian_smooth


def phantom(dims=(32, 32, 32), spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)) -> tuple[Volume, Volume]:
    """A body ellipsoid with two darker lung lobes, plus the matching binary lung mask."""
    x, y, z = np.meshgrid(*[np.arange(n) / (n - 1) for n in dims], indexing="ij")
    body = ((x - 0.5) / 0.45) ** 2 + ((y - 0.5) / 0.4) ** 2 + ((z - 0.5) / 0.48) ** 2 <= 1.0
    lungs = np.zeros(dims, dtype=bool)
    for cx in (0.32, 0.68):
        lungs |= ((x - cx) / 0.14) ** 2 + ((y - 0.5) / 0.22) ** 2 + ((z - 0.55) / 0.3) ** 2 <= 1.0
    img = np.where(body, 40.0, -1000.0)
    img = np.where(lungs, -800.0, img)
    img = img + 60.0 * np.sin(6.0 * x) * np.cos(5.0 * y) * np.sin(4.0 * z + 0.3)
    return Volume(img, spacing, origin), Volume(lungs.astype(np.float64), spacing, origin)


def smooth_random_field(dims, amplitude=2.0, sigma=3.0, seed=0, spacing=(1.0, 1.0, 1.0)) -> DisplacementField:
    rng = np.random.default_rng(seed)
    raw = DisplacementField(rng.standard_normal(tuple(dims) + (3,)), spacing)
    sm = gaussian_smooth(raw, sigma)
    return sm.with_data(sm.data / np.abs(sm.data).max() * amplitude)


def scalar_trilinear(data: np.ndarray, p) -> np.ndarray:
    """Textbook 8-corner trilinear interpolation at one index point, clamped to the grid."""
    n = data.shape[:3]
    q = [min(max(float(p[a]), 0.0), n[a] - 1.0) for a in range(3)]
    i0 = [min(int(math.floor(q[a])), n[a] - 2) for a in range(3)]
    t = [q[a] - i0[a] for a in range(3)]
    acc = np.zeros(data.shape[3:])
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                w = (t[0] if dx else 1 - t[0]) * (t[1] if dy else 1 - t[1]) * (t[2] if dz else 1 - t[2])
                acc = acc + w * data[i0[0] + dx, i0[1] + dy, i0[2] + dz]
    return acc


@pytest.fixture
def small_phantom():
    return phantom()


@pytest.fixture(scope="session")
def phantom64():
    return phantom((64, 64, 64))


def pytest_terminal_summary(terminalreporter):
    from test_acceptance import RESULTS

    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
