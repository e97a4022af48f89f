import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass
class MSGMConfig:
    # hidden width = round(channels * hidden_ratio)
    hidden_ratio: float = 0.5
    dw_kernel: int = 3

    def hidden(self, channels: int) -> int:
        return max(1, int(round(channels * self.hidden_ratio)))

    def validate(self):
        if self.hidden_ratio <= 0:
            raise ValueError("msgm.hidden_ratio must be positive")
        if self.dw_kernel < 3 or self.dw_kernel % 2 == 0:
            raise ValueError("msgm.dw_kernel must be odd and >= 3")


@dataclass
class ESAMConfig:
    pool_kernel: int = 3
    pool_stride: int = 3
    block_size: int = 8
    overlap: int = 2
    num_heads: int = 4

    def validate(self, channels: int):
        if self.pool_kernel < 1 or self.pool_stride < 1:
            raise ValueError("esam.pool_kernel and esam.pool_stride must be >= 1")
        if self.block_size < 1:
            raise ValueError("esam.block_size must be >= 1")
        if not 0 <= self.overlap < self.block_size:
            raise ValueError("esam.overlap must satisfy 0 <= overlap < block_size")
        if self.num_heads < 1 or channels % self.num_heads:
            raise ValueError(f"esam.num_heads={self.num_heads} must divide channels={channels}")


@dataclass
class MoEFSConfig:
    num_experts: int = 3

    def validate(self):
        if self.num_experts < 2:
            raise ValueError("moe.num_experts must be >= 2")


def _check_channels(x, channels, who):
    if x.dim() != 4 or x.shape[1] != channels:
        raise ValueError(f"{who} expects (B, {channels}, H, W) input, got {tuple(x.shape)}")


def _pad_br(x, pad_h, pad_w):
    """Pad bottom/right; reflect where the map is large enough, replicate otherwise."""
    if pad_h == 0 and pad_w == 0:
        return x
    h, w = x.shape[-2:]
    mode = "reflect" if pad_h < h and pad_w < w else "replicate"
    return F.pad(x, (0, pad_w, 0, pad_h), mode=mode)


class LayerNorm2d(nn.Module):
    """LayerNorm over the channel axis at every spatial position."""

    def __init__(self, channels, eps=1e-6):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


class MSGM(nn.Module):
    """Mixed-scale gating module.

    A 1x1 branch, passed through GeLU, gates a 1x1 -> depth-wise -> 1x1 branch;
    the product is projected back with a 1x1 conv.
    """

    def __init__(self, channels, cfg: MSGMConfig = None):
        super().__init__()
        cfg = cfg or MSGMConfig()
        cfg.validate()
        hidden = cfg.hidden(channels)
        self.channels = channels
        self.gate = nn.Conv2d(channels, hidden, 1)
        self.proj_in = nn.Conv2d(channels, hidden, 1)
        self.dw = nn.Conv2d(hidden, hidden, cfg.dw_kernel, padding=cfg.dw_kernel // 2, groups=hidden)
        self.proj_mid = nn.Conv2d(hidden, hidden, 1)
        self.proj_out = nn.Conv2d(hidden, channels, 1)

    def forward(self, x):
        _check_channels(x, self.channels, "MSGM")
        f1 = self.gate(x)
        f2 = self.proj_mid(self.dw(self.proj_in(x)))
        return self.proj_out(F.gelu(f1) * f2)


def sparse_downsample(x, pool_kernel, pool_stride):
    h, w = x.shape[-2:]
    if h < pool_kernel or w < pool_kernel:
        raise ValueError(f"spatial size {h}x{w} is smaller than the pooling kernel {pool_kernel}")
    return F.max_pool2d(x, pool_kernel, pool_stride)


def pooled_padded_size(n, pool_kernel, pool_stride):
    """Smallest n' >= max(n, kernel) for which pooling covers every input pixel exactly."""
    n = max(n, pool_kernel)
    return pool_kernel + math.ceil((n - pool_kernel) / pool_stride) * pool_stride


def block_padded_size(n, M, O):
    """Smallest n' >= max(n, M) with (n' - M) divisible by (M - O)."""
    if O >= M:
        raise ValueError(f"overlap {O} must be smaller than block size {M}")
    n = max(n, M)
    step = M - O
    return M + math.ceil((n - M) / step) * step


def num_blocks(h, w, M, O):
    step = M - O
    return ((h - M) // step + 1) * ((w - M) // step + 1)


def block_partition(x, M, O):
    """(B, C, H, W) -> (B, L, C, M*M) overlapping windows, row-major over window origins."""
    if O >= M or O < 0:
        raise ValueError(f"overlap must satisfy 0 <= O < M, got M={M}, O={O}")
    b, c, h, w = x.shape
    step = M - O
    if h < M or w < M or (h - M) % step or (w - M) % step:
        raise ValueError(f"{h}x{w} map cannot be tiled by {M}x{M} blocks with overlap {O}; pad it first")
    cols = F.unfold(x, M, stride=step)  # (B, C*M*M, L)
    return cols.view(b, c, M * M, -1).permute(0, 3, 1, 2)


def block_merge(blocks, h, w, M, O):
    """Inverse of block_partition; overlapped positions are averaged."""
    b, n, c, mm = blocks.shape
    step = M - O
    cols = blocks.permute(0, 2, 3, 1).reshape(b, c * mm, n)
    summed = F.fold(cols, (h, w), M, stride=step)
    ones = torch.ones(1, mm, n, dtype=blocks.dtype, device=blocks.device)
    count = F.fold(ones, (h, w), M, stride=step)
    return summed / count


def block_attention(q, k, v, num_heads):
    """Softmax(q k^T / sqrt(d_k)) v per block and head.

    q, k, v: (B, L, C, T) token blocks. Returns (out, attn) with out shaped like v
    and attn (B, L, heads, T, T).
    """
    b, n, c, t = q.shape
    dh = c // num_heads

    def heads(x):
        return x.reshape(b, n, num_heads, dh, t).transpose(-1, -2)  # (B, L, h, T, dh)

    qh, kh, vh = heads(q), heads(k), heads(v)
    attn = torch.softmax(qh @ kh.transpose(-1, -2) / math.sqrt(dh), dim=-1)
    out = (attn @ vh).transpose(-1, -2).reshape(b, n, c, t)
    return out, attn


class ESAM(nn.Module):
    """Efficient sparse attention module.

    Max-pool the map, run multi-head self-attention inside overlapping M x M
    windows of the pooled map, merge, refine with a 3x3 conv and bilinearly
    upsample back. ``mode="dense"`` skips pooling/upsampling (the full-resolution
    ablation).

    Set ``record = True`` to keep the last attention maps and pre-merge block
    outputs in ``self.trace``.
    """

    def __init__(self, channels, cfg: ESAMConfig = None, mode="sparse"):
        super().__init__()
        cfg = cfg or ESAMConfig()
        cfg.validate(channels)
        if mode not in ("sparse", "dense"):
            raise ValueError(f"unknown attention mode {mode!r}")
        self.channels = channels
        self.cfg = cfg
        self.mode = mode
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 3, padding=1)
        self.record = False
        self.trace = {}

    def forward(self, x):
        _check_channels(x, self.channels, "ESAM")
        cfg = self.cfg
        h, w = x.shape[-2:]
        if self.mode == "sparse":
            hp = pooled_padded_size(h, cfg.pool_kernel, cfg.pool_stride)
            wp = pooled_padded_size(w, cfg.pool_kernel, cfg.pool_stride)
            x = sparse_downsample(_pad_br(x, hp - h, wp - w), cfg.pool_kernel, cfg.pool_stride)
        h1, w1 = x.shape[-2:]
        M, O = cfg.block_size, cfg.overlap
        hb, wb = block_padded_size(h1, M, O), block_padded_size(w1, M, O)
        x = _pad_br(x, hb - h1, wb - w1)

        q, k, v = self.qkv(x).chunk(3, dim=1)
        q, k, v = (block_partition(t, M, O) for t in (q, k, v))
        y, attn = block_attention(q, k, v, cfg.num_heads)
        if self.record:
            self.trace = {"attn": attn.detach(), "v_blocks": v.detach(), "blocks": y.detach()}
        y = block_merge(y, hb, wb, M, O)[..., :h1, :w1]
        y = self.proj(y)

        if self.mode == "sparse":
            y = F.interpolate(y, size=(hp, wp), mode="bilinear", align_corners=False)
            y = y[..., :h, :w]
        return y


class MoEFS(nn.Module):
    """Softmax-gated fusion of tapped stage outputs plus a residual 1x1 conv.

    The gate is computed per expert, channel and pixel (softmax over the expert axis).
    """

    def __init__(self, channels, cfg: MoEFSConfig = None):
        super().__init__()
        cfg = cfg or MoEFSConfig()
        cfg.validate()
        self.channels = channels
        self.num_experts = cfg.num_experts
        self.experts = nn.ModuleList(nn.Conv2d(channels, channels, 1) for _ in range(cfg.num_experts))
        self.fuse = nn.Conv2d(channels, channels, 1)
        self.record = False
        self.trace = {}

    def forward(self, alphas):
        if len(alphas) != self.num_experts:
            raise ValueError(f"MoE-FS expects {self.num_experts} inputs, got {len(alphas)}")
        shape = alphas[0].shape
        for a in alphas:
            if a.shape != shape:
                raise ValueError(f"expert inputs disagree in shape: {tuple(a.shape)} vs {tuple(shape)}")
            _check_channels(a, self.channels, "MoE-FS")
        logits = torch.stack([conv(a) for conv, a in zip(self.experts, alphas)], dim=0)
        gates = torch.softmax(logits, dim=0)
        fused = (torch.stack(list(alphas), dim=0) * gates).sum(0)
        if self.record:
            self.trace = {"gates": gates.detach(), "fused": fused.detach()}
        return fused + self.fuse(fused)


class SSReM(nn.Module):
    """One unfolded stage.

    z = MSGM1(LN(a)); beta = MSGM2(LN(a)); v_hat = z + a + f_y;
    v = ESAM(v_hat) + v_hat; a_hat = MSGM3(v + beta) + beta; a' = MSGM4(a_hat) + a_hat
    """

    def __init__(self, channels, msgm: MSGMConfig = None, esam: ESAMConfig = None, attention_mode="sparse"):
        super().__init__()
        self.channels = channels
        self.norm_z = LayerNorm2d(channels)
        self.norm_beta = LayerNorm2d(channels)
        self.msgm_z = MSGM(channels, msgm)
        self.msgm_beta = MSGM(channels, msgm)
        self.esam = ESAM(channels, esam, mode=attention_mode)
        self.msgm_agg = MSGM(channels, msgm)
        self.msgm_ffn = MSGM(channels, msgm)

    def forward(self, alpha, f_y):
        if alpha.shape != f_y.shape:
            raise ValueError(f"alpha {tuple(alpha.shape)} and f_y {tuple(f_y.shape)} must share a shape")
        z = self.msgm_z(self.norm_z(alpha))
        beta = self.msgm_beta(self.norm_beta(alpha))
        v_hat = z + alpha + f_y
        v = self.esam(v_hat) + v_hat
        alpha_hat = self.msgm_agg(v + beta) + beta
        return self.msgm_ffn(alpha_hat) + alpha_hat
