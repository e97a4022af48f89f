"""Y-channel PSNR/SSIM and the benchmark harness."""

import json
import math
import platform
import resource
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F

from .data import DatasetManifest, bicubic_resize, load_pairs, save_image

# BT.601 studio swing, inputs in [0, 1]
_Y_COEF = (65.481, 128.553, 24.966)


def rgb_to_y(img: torch.Tensor) -> torch.Tensor:
    """(..., 3, H, W) RGB in [0, 1] -> (..., H, W) luma in [16/255, 235/255]."""
    if img.shape[-3] != 3:
        raise ValueError(f"expected 3 channels, got shape {tuple(img.shape)}")
    r, g, b = img.unbind(-3)
    return (_Y_COEF[0] * r + _Y_COEF[1] * g + _Y_COEF[2] * b + 16.0) / 255.0


def _shaved_y(pred, gt, shave):
    if pred.shape != gt.shape:
        raise ValueError(f"image shapes differ: {tuple(pred.shape)} vs {tuple(gt.shape)}")
    if shave < 0:
        raise ValueError("shave must be >= 0")
    h, w = pred.shape[-2:]
    if h <= 2 * shave or w <= 2 * shave:
        raise ValueError(f"{h}x{w} image is too small for a {shave}-pixel shave")
    py, gy = rgb_to_y(pred.double()), rgb_to_y(gt.double())
    if shave:
        py, gy = py[..., shave:-shave, shave:-shave], gy[..., shave:-shave, shave:-shave]
    return py, gy


def psnr_y(pred, gt, shave: int = 0) -> float:
    py, gy = _shaved_y(pred, gt, shave)
    mse = float(((py - gy) ** 2).mean())
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(1.0 / mse)


def gaussian_window(size=11, sigma=1.5):
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return np.outer(g, g)


def ssim_y(pred, gt, shave: int = 0, window: int = 11, sigma: float = 1.5, k1=0.01, k2=0.03) -> float:
    py, gy = _shaved_y(pred, gt, shave)
    if py.shape[-1] < window or py.shape[-2] < window:
        raise ValueError(f"image {tuple(py.shape[-2:])} is smaller than the {window}x{window} SSIM window")
    c1, c2 = (k1 * 1.0) ** 2, (k2 * 1.0) ** 2
    win = torch.from_numpy(gaussian_window(window, sigma))[None, None]
    x = py.reshape(-1, 1, *py.shape[-2:])
    y = gy.reshape(-1, 1, *gy.shape[-2:])

    def filt(t):
        return F.conv2d(t, win)

    mx, my = filt(x), filt(y)
    sxx = filt(x * x) - mx * mx
    syy = filt(y * y) - my * my
    sxy = filt(x * y) - mx * my
    ssim_map = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(ssim_map.mean())


# ----------------------------------------------------------------------- harness


@dataclass
class ImageResult:
    name: str
    psnr: float
    ssim: float
    ms: float


@dataclass
class MetricsReport:
    dataset: str
    scale: int
    rows: list = field(default_factory=list)
    device: str = ""
    params: Optional[int] = None
    flops_1280x720: Optional[int] = None
    tiled: bool = False

    @property
    def mean_psnr(self):
        return statistics.fmean(r.psnr for r in self.rows) if self.rows else math.nan

    @property
    def mean_ssim(self):
        return statistics.fmean(r.ssim for r in self.rows) if self.rows else math.nan

    def to_table(self) -> str:
        lines = [f"{self.dataset} x{self.scale}" + (" (tiled)" if self.tiled else ""),
                 f"{'image':<24}{'PSNR':>10}{'SSIM':>10}{'ms':>10}"]
        for r in self.rows:
            lines.append(f"{r.name:<24}{r.psnr:>10.3f}{r.ssim:>10.4f}{r.ms:>10.1f}")
        lines.append(f"{'mean':<24}{self.mean_psnr:>10.3f}{self.mean_ssim:>10.4f}")
        if self.params is not None:
            lines.append(f"params: {self.params}")
        if self.flops_1280x720 is not None:
            lines.append(f"FLOPs @1280x720: {self.flops_1280x720 / 1e9:.2f} G")
        lines.append(f"device: {self.device}")
        return "\n".join(lines)

    def to_records(self):
        for r in self.rows:
            yield {"type": "image", "dataset": self.dataset, "scale": self.scale, **asdict(r)}
        yield {
            "type": "summary",
            "dataset": self.dataset,
            "scale": self.scale,
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "n_images": len(self.rows),
            "device": self.device,
            "params": self.params,
            "flops_1280x720": self.flops_1280x720,
            "tiled": self.tiled,
        }

    def write_jsonl(self, path):
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for rec in self.to_records():
                f.write(json.dumps(rec) + "\n")


def device_description(device=None) -> str:
    device = torch.device(device or "cpu")
    if device.type == "cuda":
        return torch.cuda.get_device_name(device)
    return f"cpu ({platform.processor() or platform.machine()}, {torch.get_num_threads()} threads)"


@torch.no_grad()
def forward_tiled(model, lr, tile: int, overlap: int = 8):
    """Run ``model`` on overlapping LR tiles and average the overlapping HR outputs."""
    s = model.scale
    _, _, h, w = lr.shape
    step = max(1, tile - overlap)
    out = torch.zeros(lr.shape[0], 3, h * s, w * s, dtype=lr.dtype, device=lr.device)
    weight = torch.zeros_like(out)
    tops = list(range(0, max(h - tile, 0) + 1, step))
    lefts = list(range(0, max(w - tile, 0) + 1, step))
    if tops[-1] + tile < h:
        tops.append(h - tile)
    if lefts[-1] + tile < w:
        lefts.append(w - tile)
    for t in tops:
        for l in lefts:
            patch = lr[..., t : t + tile, l : l + tile]
            sr = model(patch)
            out[..., t * s : t * s + sr.shape[-2], l * s : l * s + sr.shape[-1]] += sr
            weight[..., t * s : t * s + sr.shape[-2], l * s : l * s + sr.shape[-1]] += 1
    return out / weight


@torch.no_grad()
def super_resolve(model, lr, tile: Optional[int] = None, tile_overlap: int = 8):
    squeeze = lr.dim() == 3
    x = lr.unsqueeze(0) if squeeze else lr
    p = next(model.parameters(), None)
    if p is not None:
        x = x.to(p)
    sr = forward_tiled(model, x, tile, tile_overlap) if tile else model(x)
    sr = sr.clamp(0, 1)
    return sr.squeeze(0) if squeeze else sr


def evaluate_pairs(model, pairs, scale, name="dataset", tile=None, device=None) -> MetricsReport:
    model.eval()
    report = MetricsReport(dataset=name, scale=scale, device=device_description(device), tiled=bool(tile))
    for pair in pairs:
        t0 = time.perf_counter()
        sr = super_resolve(model, pair.lr, tile=tile).cpu().to(pair.hr.dtype)
        ms = (time.perf_counter() - t0) * 1e3
        report.rows.append(
            ImageResult(pair.name, psnr_y(sr, pair.hr, shave=scale), ssim_y(sr, pair.hr, shave=scale), ms)
        )
    return report


def evaluate(model, dataset: DatasetManifest, scale: int, tile=None, device=None) -> MetricsReport:
    if dataset.scale != scale:
        raise ValueError(f"dataset was indexed for x{dataset.scale}, asked to evaluate x{scale}")
    dataset.check()
    pairs = load_pairs(dataset)
    return evaluate_pairs(model, pairs, scale, name=f"{dataset.root.name}/{dataset.split}", tile=tile, device=device)


def bicubic_baseline(pairs, scale) -> MetricsReport:
    report = MetricsReport(dataset="bicubic", scale=scale, device="n/a")
    for pair in pairs:
        h, w = pair.hr.shape[-2:]
        up = bicubic_resize(pair.lr, h, w).clamp(0, 1)
        report.rows.append(ImageResult(pair.name, psnr_y(up, pair.hr, scale), ssim_y(up, pair.hr, scale), 0.0))
    return report


def save_comparison(pair, sr, path, box=None):
    """Side-by-side PNG: bicubic | model | HR, optionally cropped to box=(top, left, size)."""
    h, w = pair.hr.shape[-2:]
    panels = [bicubic_resize(pair.lr, h, w).clamp(0, 1), sr.clamp(0, 1), pair.hr]
    if box is not None:
        t, l, n = box
        panels = [p[..., t : t + n, l : l + n] for p in panels]
    save_image(torch.cat(panels, dim=-1), path)


@torch.no_grad()
def time_inference(model, h: int, w: int, n_runs: int = 100, warmup: int = 3, seed: int = 0):
    """Mean/std wall time (ms) of forward passes on random ``3 x h x w`` inputs.

    Memory is the CUDA peak allocation on GPU, otherwise the process peak RSS.
    """
    if n_runs < 1:
        raise ValueError("n_runs must be >= 1")
    model.eval()
    p = next(model.parameters(), None)
    device = p.device if p is not None else torch.device("cpu")
    gen = torch.Generator().manual_seed(seed)
    x = torch.rand(1, 3, h, w, generator=gen).to(device)
    for _ in range(warmup):
        model(x)
    if device.type == "cuda":
        torch.cuda.synchronize()
        torch.cuda.reset_peak_memory_stats(device)
    times = []
    for _ in range(n_runs):
        t0 = time.perf_counter()
        model(x)
        if device.type == "cuda":
            torch.cuda.synchronize()
        times.append((time.perf_counter() - t0) * 1e3)
    if device.type == "cuda":
        mem, mem_kind = torch.cuda.max_memory_allocated(device), "cuda_peak_allocated_bytes"
    else:
        mem, mem_kind = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024, "process_peak_rss_bytes"
    return {
        "mean_ms": statistics.fmean(times),
        "std_ms": statistics.stdev(times) if len(times) > 1 else 0.0,
        "times_ms": times,
        "peak_memory": mem,
        "memory_kind": mem_kind,
        "input": [h, w],
    }
