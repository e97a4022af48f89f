"""LR/HR pair synthesis, patch sampling, augmentation and on-disk dataset layout.

Bicubic resampling convention (used for both training and evaluation):

* cubic convolution kernel with a = -0.5 (Keys)
* pixel-center alignment: input coordinate u = (x + 0.5) / scale - 0.5
* when shrinking, the kernel is stretched by 1/scale (anti-aliasing) and the
  taps are renormalised to sum to one
* out-of-range taps are mirrored back into the image (symmetric, edge repeated)

This matches MATLAB's ``imresize(..., 'bicubic')``, the reference used by the
classic SR benchmarks.
"""

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
from PIL import Image

log = logging.getLogger(__name__)

CUBIC_A = -0.5


def cubic(x, a=CUBIC_A):
    x = np.abs(x)
    x2, x3 = x * x, x * x * x
    return np.where(
        x <= 1,
        (a + 2) * x3 - (a + 3) * x2 + 1,
        np.where(x < 2, a * x3 - 5 * a * x2 + 8 * a * x - 4 * a, 0.0),
    )


def _mirror(idx, n):
    period = 2 * n
    idx = np.mod(idx, period)
    return np.where(idx < n, idx, period - 1 - idx)


def resize_matrix(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) matrix W with out = W @ in along one axis."""
    scale = n_out / n_in
    kscale = min(scale, 1.0)
    support = 2.0 / kscale
    x = np.arange(n_out, dtype=np.float64)
    u = (x + 0.5) / scale - 0.5
    left = np.floor(u - support).astype(np.int64)
    taps = int(math.ceil(2 * support)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    w = kscale * cubic((u[:, None] - idx) * kscale)
    w /= w.sum(axis=1, keepdims=True)
    W = np.zeros((n_out, n_in))
    np.add.at(W, (np.repeat(np.arange(n_out), taps), _mirror(idx, n_in).ravel()), w.ravel())
    return W


def bicubic_resize(img: torch.Tensor, out_h: int, out_w: int) -> torch.Tensor:
    """Resize a (..., H, W) tensor. No clamping: values may overshoot [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    h, w = img.shape[-2:]
    if (h, w) == (out_h, out_w):
        return img.clone()
    Wh = torch.from_numpy(resize_matrix(h, out_h)).to(img)
    Ww = torch.from_numpy(resize_matrix(w, out_w)).to(img)
    return Wh @ img @ Ww.T


# ------------------------------------------------------------------------- pairs


@dataclass
class SRPair:
    hr: torch.Tensor
    lr: torch.Tensor
    scale: int
    name: str = ""

    def __post_init__(self):
        hh, hw = self.hr.shape[-2:]
        lh, lw = self.lr.shape[-2:]
        if (hh, hw) != (lh * self.scale, lw * self.scale):
            raise ValueError(f"HR {hh}x{hw} is not {self.scale}x LR {lh}x{lw}")


def crop_to_multiple(hr: torch.Tensor, s: int) -> torch.Tensor:
    h, w = hr.shape[-2:]
    nh, nw = h - h % s, w - w % s
    top, left = (h - nh) // 2, (w - nw) // 2
    return hr[..., top : top + nh, left : left + nw]


def make_pair(hr: torch.Tensor, s: int, name: str = "") -> SRPair:
    h, w = hr.shape[-2:]
    if h < s or w < s:
        raise ValueError(f"HR image {h}x{w} is smaller than the scale {s}")
    hr = crop_to_multiple(hr, s)
    h, w = hr.shape[-2:]
    return SRPair(hr=hr, lr=bicubic_resize(hr, h // s, w // s), scale=s, name=name)


def sample_patch(pair: SRPair, patch_lr: int, rng: np.random.Generator) -> SRPair:
    lh, lw = pair.lr.shape[-2:]
    if patch_lr > lh or patch_lr > lw:
        raise ValueError(f"patch {patch_lr} larger than LR image {lh}x{lw}")
    s = pair.scale
    top = int(rng.integers(0, lh - patch_lr + 1))
    left = int(rng.integers(0, lw - patch_lr + 1))
    lr = pair.lr[..., top : top + patch_lr, left : left + patch_lr]
    hr = pair.hr[..., top * s : (top + patch_lr) * s, left * s : (left + patch_lr) * s]
    return SRPair(hr=hr, lr=lr, scale=s, name=pair.name)


def transform(img, flip: bool, k: int):
    if flip:
        img = img.flip(-1)
    if k:
        img = torch.rot90(img, k, dims=(-2, -1))
    return img


def augment(pair: SRPair, rng: np.random.Generator) -> SRPair:
    """Horizontal flip (p=0.5) and rotation by k*90 degrees (p=0.5, k in 0..3), same for HR and LR."""
    flip = bool(rng.random() < 0.5)
    k = int(rng.integers(0, 4)) if rng.random() < 0.5 else 0
    return SRPair(
        hr=transform(pair.hr, flip, k).contiguous(),
        lr=transform(pair.lr, flip, k).contiguous(),
        scale=pair.scale,
        name=pair.name,
    )


# ---------------------------------------------------------------------- image io


def load_image(path) -> torch.Tensor:
    """8-bit PNG -> float32 (3, H, W) in [0, 1]. Grayscale is replicated to 3 channels."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L"):
            im = im.convert("RGB")
        arr = np.asarray(im, dtype=np.float32) / 255.0
    if arr.ndim == 2:
        arr = np.repeat(arr[..., None], 3, axis=2)
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(2, 0, 1)))


def to_uint8(img: torch.Tensor) -> np.ndarray:
    arr = img.detach().cpu().clamp(0, 1).mul(255.0).round().to(torch.uint8).numpy()
    return arr.transpose(1, 2, 0)


def save_image(img: torch.Tensor, path):
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path, format="PNG")


# ----------------------------------------------------------------- dataset layout


@dataclass
class DatasetManifest:
    root: Path
    split: str
    scale: int
    entries: list = field(default_factory=list)  # (hr_path, lr_path or None)

    def check(self):
        missing = [str(p) for e in self.entries for p in e if p is not None and not Path(p).is_file()]
        if missing:
            raise FileNotFoundError("missing dataset files: " + ", ".join(missing))
        return self

    def __len__(self):
        return len(self.entries)


def _index_path(root: Path, split: str, scale: int) -> Path:
    return root / split / f"index_x{scale}.txt"


def scan_dataset(root, split: str, scale: int, regenerate: bool = False, synthesize: bool = True,
                 max_images: Optional[int] = None) -> DatasetManifest:
    """Index ``root/split/HR/*.png`` and ``root/split/LR/x{scale}/*.png``.

    Missing LR images are synthesised with `make_pair` and cached as PNG. The index
    is cached as a tab-separated text file next to the HR folder.
    """
    root = Path(root)
    hr_dir = root / split / "HR"
    lr_dir = root / split / "LR" / f"x{scale}"
    index = _index_path(root, split, scale)
    if not hr_dir.is_dir():
        raise FileNotFoundError(f"no HR folder at {hr_dir}")
    if index.is_file() and not regenerate:
        entries = []
        for line in index.read_text().splitlines():
            hr, lr = line.split("\t")
            entries.append((root / hr, root / lr if lr else None))
    else:
        entries = []
        for hr_path in sorted(hr_dir.glob("*.png")):
            lr_path = lr_dir / hr_path.name
            if (regenerate or not lr_path.is_file()) and synthesize:
                pair = make_pair(load_image(hr_path), scale)
                save_image(pair.lr, lr_path)
            entries.append((hr_path, lr_path if lr_path.is_file() else None))
        lines = [f"{h.relative_to(root)}\t{l.relative_to(root) if l else ''}" for h, l in entries]
        index.write_text("\n".join(lines) + ("\n" if lines else ""))
    if max_images is not None:
        entries = entries[:max_images]
    return DatasetManifest(root=root, split=split, scale=scale, entries=entries).check()


def load_pairs(manifest: DatasetManifest) -> list:
    pairs = []
    for hr_path, lr_path in manifest.entries:
        hr = load_image(hr_path)
        if lr_path is None:
            pair = make_pair(hr, manifest.scale, name=Path(hr_path).stem)
        else:
            lr = load_image(lr_path)
            s = manifest.scale
            hr = crop_to_multiple(hr, s)[..., : lr.shape[-2] * s, : lr.shape[-1] * s]
            pair = SRPair(hr=hr, lr=lr, scale=s, name=Path(hr_path).stem)
        pairs.append(pair)
    return pairs


class PatchSampler(torch.utils.data.Dataset):
    """Item ``(it, slot)`` of a training run, drawn with its own seeded generator.

    Seeding per item keeps batches identical regardless of loader parallelism.
    """

    def __init__(self, pairs, patch_lr, batch_size, seed=0, do_augment=True):
        if not pairs:
            raise ValueError("training set is empty")
        self.pairs = [p for p in pairs if min(p.lr.shape[-2:]) >= patch_lr]
        if not self.pairs:
            raise ValueError(f"no training image has an LR side >= patch size {patch_lr}")
        self.patch_lr = patch_lr
        self.batch_size = batch_size
        self.seed = seed
        self.do_augment = do_augment

    def __len__(self):
        return 2**31 - 1

    def sample(self, it, slot):
        rng = np.random.default_rng([self.seed, it, slot])
        idx = int(rng.integers(0, len(self.pairs)))
        p = sample_patch(self.pairs[idx], self.patch_lr, rng)
        if self.do_augment:
            p = augment(p, rng)
        return p.lr, p.hr, idx

    def batch(self, it):
        items = [self.sample(it, slot) for slot in range(self.batch_size)]
        lr = torch.stack([i[0] for i in items])
        hr = torch.stack([i[1] for i in items])
        return lr, hr, [i[2] for i in items]

    def __getitem__(self, it):
        return self.batch(it)
