import os

import numpy as np
import pytest

from radiodx import imaging
from radiodx.dataset import ManifestEntry, dump_manifest

_acceptance: list[tuple[int, str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance(number, title): exit criterion")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("acceptance")
    if marker is None:
        return
    if rep.when == "call" or (rep.when == "setup" and not rep.passed):
        _acceptance.append((marker.args[0], marker.args[1], "PASS" if rep.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, status in sorted(_acceptance):
        terminalreporter.write_line(f"[{status}] criterion {number:2d}: {title}")


def write_gray(path, arr01):
    raster = imaging.Raster.from_array(np.rint(np.clip(arr01, 0, 1) * 255).astype(np.uint8))
    imaging.save_raster(raster, path)


def brightness_set(directory, n, seed, size=64):
    """Classes separable by mean brightness: NORMAL around 0.35, PNEUMONIA around 0.65."""
    rng = np.random.default_rng(seed)
    os.makedirs(directory, exist_ok=True)
    entries = []
    for i in range(n):
        y = i % 2
        img = (0.65 if y else 0.35) + 0.15 * rng.standard_normal((size, size))
        path = os.path.join(directory, f"img{i:03d}.pgm")
        write_gray(path, img)
        entries.append(ManifestEntry(path, "PNEUMONIA" if y else "NORMAL"))
    return entries


def quadrant_set(directory, n, seed, size=64):
    """PNEUMONIA = bright top-left quadrant; NORMAL = bright patch in one of the other quadrants."""
    rng = np.random.default_rng(seed)
    os.makedirs(directory, exist_ok=True)
    half = size // 2
    entries = []
    for i in range(n):
        y = i % 2
        img = 0.05 + 0.03 * rng.standard_normal((size, size))
        q = 0 if y else int(rng.integers(1, 4))
        r, c = divmod(q, 2)
        img[r * half:(r + 1) * half, c * half:(c + 1) * half] += 0.75
        path = os.path.join(directory, f"img{i:03d}.pgm")
        write_gray(path, img)
        entries.append(ManifestEntry(path, "PNEUMONIA" if y else "NORMAL"))
    return entries


def write_manifest(path, entries):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_manifest(entries))
    return path


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)
