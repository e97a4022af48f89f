import hashlib
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from .blocks import MoEFS, SSReM, block_padded_size, num_blocks, pooled_padded_size
from .config import SSIUConfig, dump_yaml, model_config_from_dict


class CheckpointError(RuntimeError):
    pass


class SSIU(nn.Module):
    """Shallow 3x3 conv -> N unfolded stages -> MoE-FS -> pixel-shuffle head, plus bilinear skip."""

    def __init__(self, cfg: SSIUConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        C, s = cfg.channels, cfg.scale
        self.scale = s
        self.head = nn.Conv2d(3, C, 3, padding=1)
        self.stages = nn.ModuleList(
            SSReM(C, cfg.msgm, cfg.esam, attention_mode=cfg.attention_mode) for _ in range(cfg.num_stages)
        )
        self.moe = MoEFS(C, cfg.moe) if cfg.use_moe_fs else None
        self.moe_taps = cfg.moe_taps
        self.tail = nn.Sequential(
            nn.Conv2d(C, C * s * s, 1),
            nn.PixelShuffle(s),
            nn.GELU(),
            nn.Conv2d(C, 3, 3, padding=1),
        )

    def features(self, y):
        """Returns (f_y, [alpha^0, ..., alpha^N])."""
        f_y = self.head(y)
        alphas = [f_y]
        for stage in self.stages:
            alphas.append(stage(alphas[-1], f_y))
        return f_y, alphas

    def forward(self, y):
        squeeze = y.dim() == 3
        if squeeze:
            y = y.unsqueeze(0)
        if y.dim() != 4 or y.shape[1] != 3:
            raise ValueError(f"SSIU expects a 3-channel image, got shape {tuple(y.shape)}")
        f_y, alphas = self.features(y)
        if self.moe is not None:
            f_x = self.moe([alphas[t] for t in self.moe_taps])
        else:
            f_x = alphas[-1]
        out = self.tail(f_x + f_y) + F.interpolate(y, scale_factor=self.scale, mode="bilinear", align_corners=False)
        return out.squeeze(0) if squeeze else out


def init_parameters(model: nn.Module, seed: int):
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for m in model.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.trunc_normal_(m.weight, std=0.02, a=-0.04, b=0.04)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
    return model


def build_model(cfg: SSIUConfig, seed: int = 0) -> SSIU:
    # module constructors draw default inits from the global RNG; keep the caller's stream untouched
    with torch.random.fork_rng(devices=[]):
        model = SSIU(cfg)
    return init_parameters(model, seed)


def zero_parameters(model: nn.Module):
    with torch.no_grad():
        for p in model.parameters():
            p.zero_()
    return model


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters())


# --------------------------------------------------------------------------- FLOPs

FLOP_RULES = """\
FLOP accounting:
  * convolutions: 2 * (C_in / groups) * k^2 * C_out per output pixel (multiply-accumulate x2); bias adds not counted
  * attention: 2 * T * d_k per score (QK^T) and per output element (AV), T = M^2 tokens per window, summed over heads and windows
  * softmax: 3 per score; score scaling: 1 per score
  * LayerNorm: 5 per element; GeLU: 1 per element; elementwise add / multiply: 1 per element
  * max-pool: k^2 - 1 comparisons per output; bilinear resize: 7 per output element
  * window merge: 1 add per token element + 1 divide per map element; padding, reshapes, pixel shuffle: free
  * input size = output size // scale; ESAM padding is included in the counted map sizes
"""


@dataclass
class FlopReport:
    total: int
    breakdown: dict = field(default_factory=dict)
    rules: str = FLOP_RULES

    def __int__(self):
        return self.total

    @property
    def giga(self):
        return self.total / 1e9


def _conv(cin, cout, k, px, groups=1):
    return 2 * (cin // groups) * k * k * cout * px


def _msgm_flops(C, hidden, k, px):
    return (
        _conv(C, hidden, 1, px) * 2
        + _conv(hidden, hidden, k, px, groups=hidden)
        + _conv(hidden, hidden, 1, px)
        + _conv(hidden, C, 1, px)
        + 2 * hidden * px  # GeLU + gating product
    )


def _esam_flops(cfg: SSIUConfig, h, w):
    C, e = cfg.channels, cfg.esam
    out = {}
    if cfg.attention_mode == "sparse":
        hp, wp = pooled_padded_size(h, e.pool_kernel, e.pool_stride), pooled_padded_size(w, e.pool_kernel, e.pool_stride)
        h1 = (hp - e.pool_kernel) // e.pool_stride + 1
        w1 = (wp - e.pool_kernel) // e.pool_stride + 1
        out["pool"] = (e.pool_kernel**2 - 1) * C * h1 * w1
        out["upsample"] = 7 * C * hp * wp
    else:
        h1, w1 = h, w
    M, O = e.block_size, e.overlap
    hb, wb = block_padded_size(h1, M, O), block_padded_size(w1, M, O)
    L, T = num_blocks(hb, wb, M, O), M * M
    out["qkv"] = _conv(C, 3 * C, 1, hb * wb)
    scores = L * e.num_heads * T * T
    out["attention"] = 2 * 2 * L * T * T * C + 4 * scores
    out["merge"] = L * C * T + C * hb * wb
    out["proj"] = _conv(C, C, 3, h1 * w1)
    return out


def estimate_flops(cfg: SSIUConfig, out_h: int, out_w: int) -> FlopReport:
    s, C = cfg.scale, cfg.channels
    h, w = out_h // s, out_w // s
    px = h * w
    hidden = cfg.msgm.hidden(C)
    k = cfg.msgm.dw_kernel
    b = {}
    b["head"] = _conv(3, C, 3, px)
    esam = _esam_flops(cfg, h, w)
    attn_total = sum(esam.values())
    stage = (
        4 * _msgm_flops(C, hidden, k, px)
        + 2 * 5 * C * px  # two LayerNorms
        + 6 * C * px  # residual / injection adds
        + attn_total
    )
    b["stages"] = cfg.num_stages * stage
    b["attention_module"] = cfg.num_stages * attn_total
    if cfg.use_moe_fs:
        n = cfg.moe.num_experts
        b["moe_fs"] = (n + 1) * _conv(C, C, 1, px) + (3 * n + 2 * n + 1) * C * px
    else:
        b["moe_fs"] = 0
    b["tail"] = _conv(C, C * s * s, 1, px) + C * px + C * s * s * px + _conv(C, 3, 3, px * s * s)
    b["skip"] = 7 * 3 * px * s * s + 3 * px * s * s
    total = b["head"] + b["stages"] + b["moe_fs"] + b["tail"] + b["skip"]
    return FlopReport(total=int(total), breakdown=b)


# ---------------------------------------------------------------------- checkpoints

_FIXED_DATE = (2020, 1, 1, 0, 0, 0)


def _write(zf, name, payload: bytes):
    info = zipfile.ZipInfo(name, date_time=_FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, payload)


def _tensor_bytes(t: torch.Tensor) -> bytes:
    buf = io.BytesIO()
    np.save(buf, t.detach().cpu().contiguous().numpy(), allow_pickle=False)
    return buf.getvalue()


def save_checkpoint(model: SSIU, path, extra: dict = None):
    """Zip archive: config.yaml, tensors/<name>.npy, manifest.json (sha256 of every entry)."""
    entries = {"config.yaml": dump_yaml(model.cfg).encode()}
    for name, tensor in sorted(model.state_dict().items()):
        entries[f"tensors/{name}.npy"] = _tensor_bytes(tensor)
    if extra:
        entries["extra.json"] = json.dumps(extra, sort_keys=True).encode()
    manifest = {name: hashlib.sha256(data).hexdigest() for name, data in entries.items()}
    with zipfile.ZipFile(path, "w") as zf:
        for name, data in entries.items():
            _write(zf, name, data)
        _write(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())


def load_checkpoint(path):
    """Returns (model, extra). Raises CheckpointError on any integrity problem."""
    try:
        with zipfile.ZipFile(path) as zf:
            manifest = json.loads(zf.read("manifest.json"))
            entries = {}
            for name, digest in manifest.items():
                data = zf.read(name)
                if hashlib.sha256(data).hexdigest() != digest:
                    raise CheckpointError(f"checksum mismatch for {name}")
                entries[name] = data
    except CheckpointError:
        raise
    except (zipfile.BadZipFile, KeyError, ValueError, OSError) as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    cfg = model_config_from_dict(yaml.safe_load(entries["config.yaml"]))
    model = SSIU(cfg)
    state = {}
    for name, data in entries.items():
        if name.startswith("tensors/"):
            state[name[len("tensors/"):-len(".npy")]] = torch.from_numpy(np.load(io.BytesIO(data), allow_pickle=False))
    try:
        model.load_state_dict(state, strict=True)
    except RuntimeError as e:
        raise CheckpointError(f"checkpoint tensors do not match its config: {e}") from e
    extra = json.loads(entries["extra.json"]) if "extra.json" in entries else {}
    return model, extra
