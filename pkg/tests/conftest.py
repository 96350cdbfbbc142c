import numpy as np
import pytest
from PIL import Image

from vipkit.geometry import BinaryMask


def random_blob(rng: np.random.Generator, width: int, height: int) -> BinaryMask:
    """Union of a few random ellipses; never empty."""
    yy, xx = np.mgrid[:height, :width]
    bits = np.zeros((height, width), dtype=bool)
    for _ in range(int(rng.integers(1, 4))):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        a, b = rng.uniform(0.5, max(1.0, width / 2)), rng.uniform(0.5, max(1.0, height / 2))
        bits |= ((xx + 0.5 - cx) / a) ** 2 + ((yy + 0.5 - cy) / b) ** 2 <= 1
    if not bits.any():
        bits[int(rng.integers(height)), int(rng.integers(width))] = True
    return BinaryMask(bits)


def random_mask(rng: np.random.Generator, width: int, height: int, density: float | None = None) -> BinaryMask:
    density = rng.uniform(0.05, 0.95) if density is None else density
    bits = rng.random((height, width)) < density
    if not bits.any():
        bits[int(rng.integers(height)), int(rng.integers(width))] = True
    return BinaryMask(bits)


@pytest.fixture
def rng():
    return np.random.default_rng(20240101)


@pytest.fixture
def image_dir(tmp_path):
    """Three small noise images on disk."""
    rng = np.random.default_rng(7)
    d = tmp_path / "imgs"
    d.mkdir()
    for k, (w, h) in enumerate([(64, 48), (80, 60), (50, 50)]):
        Image.fromarray(rng.integers(0, 256, (h, w, 3), dtype=np.uint8)).save(d / f"img{k}.png")
    return d


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
