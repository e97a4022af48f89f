import sys
from pathlib import Path

import numpy as np
import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))

NATURAL = ("astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry", "camera", "brick", "grass", "gravel", "moon")


def natural_image(name, size=None):
    from skimage import data

    arr = getattr(data, name)()
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    img = torch.from_numpy(np.ascontiguousarray(arr[..., :3].transpose(2, 0, 1))).float() / 255.0
    if size is not None:
        h, w = img.shape[-2:]
        t, l = (h - size[0]) // 2, (w - size[1]) // 2
        img = img[:, t : t + size[0], l : l + size[1]]
    return img


@pytest.fixture(scope="session")
def skimage_images():
    return [natural_image(n, (128, 160)) for n in NATURAL[:4]]


def metric_fixture_pairs(n=10, size=(36, 40)):
    """(name, pred, gt) triples: natural crops against bicubic, noisy and shifted estimates."""
    from ssiu.data import bicubic_resize, make_pair

    out = []
    gen = torch.Generator().manual_seed(2024)
    for i, name in enumerate(NATURAL[:n]):
        gt = natural_image(name, (size[0] * 2, size[1] * 2))
        kind = i % 3
        if kind == 0:
            p = make_pair(gt, 2)
            pred = bicubic_resize(p.lr, *gt.shape[-2:]).clamp(0, 1)
        elif kind == 1:
            pred = (gt + 0.05 * torch.randn(gt.shape, generator=gen)).clamp(0, 1)
        else:
            pred = torch.roll(gt, (1, -2), (-2, -1))
        sl = (slice(None), slice(0, size[0]), slice(0, size[1]))
        out.append((name, pred[sl].double(), gt[sl].double()))
    return out


ACCEPTANCE = {}


@pytest.fixture
def verdict(request, capsys):
    """Call ``verdict(number, title, passed, detail)`` once per criterion; prints one line."""

    def _record(number, title, passed, detail=""):
        line = f"criterion {number} [{'PASS' if passed else 'FAIL'}] {title}" + (f": {detail}" if detail else "")
        ACCEPTANCE[number] = line
        with capsys.disabled():
            print("\n" + line)
        return passed

    return _record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
