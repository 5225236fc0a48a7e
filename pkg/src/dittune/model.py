"""A small Diffusion Transformer with insertable per-channel scale factors.

Canonical parameter names (the compatibility surface shared with the PEFT
engine and the checkpoint format)::

    x_embed.proj.{weight,bias}          patch projection, x_embed.gamma
    t_embed.fc1.*, t_embed.fc2.*        timestep MLP,     t_embed.gamma
    y_embed.table                       (num_classes + 1) x hidden; last row = null class
    blocks.{i}.norm1.*, blocks.{i}.norm2.*
    blocks.{i}.attn.qkv.*, blocks.{i}.attn.proj.*
    blocks.{i}.attn.gamma_qkv, blocks.{i}.attn.gamma_proj
    blocks.{i}.mlp.fc1.*, blocks.{i}.mlp.fc2.*
    blocks.{i}.adaLN.*                  conditioning -> shift/scale/gate x2
    blocks.{i}.gamma1, blocks.{i}.gamma2
    final.norm.*, final.adaLN.*, final.linear.*, final.gamma

Block indices in names are 0-based (``blocks.0`` is the first block).
Optional tensors (``gamma*``, LoRA, adapters, prompts) only exist after the
corresponding attach operation in :mod:`dittune.peft`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn


@dataclass(frozen=True)
class ModelSpec:
    image_size: int = 8
    channels: int = 3
    patch_size: int = 2
    hidden_dim: int = 64
    depth: int = 6
    num_heads: int = 4
    num_classes: int = 4
    variance_head: bool = True
    mlp_ratio: float = 4.0
    freq_dim: int = 256
    coord_divisor: float = 1.0

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ValueError("image_size must be divisible by patch_size")
        if self.hidden_dim % self.num_heads:
            raise ValueError("hidden_dim must be divisible by num_heads")
        if self.hidden_dim % 4:
            raise ValueError("hidden_dim must be divisible by 4 for the 2-D positional encoding")
        if min(self.depth, self.num_classes, self.channels) < 1 or self.coord_divisor <= 0:
            raise ValueError("depth, num_classes and channels must be >= 1; coord_divisor > 0")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid ** 2

    @property
    def out_channels(self) -> int:
        return 2 * self.channels if self.variance_head else self.channels

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model spec fields: {sorted(unknown)}")
        return cls(**d)

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


# DiT-XL/2 at 256px (32x32x4 latent). The class table is sized for a 101-class
# downstream task, which is what the fine-tuning parameter counts refer to.
XL_SPEC = ModelSpec(image_size=32, channels=4, patch_size=2, hidden_dim=1152, depth=28,
                    num_heads=16, num_classes=101, variance_head=True)
TOY_SPEC = ModelSpec()


def sincos_pos_embed(grid_h: int, grid_w: int, hidden_dim: int, coord_divisor: float = 1.0) -> np.ndarray:
    """2-D sin/cos positional table of shape ``[grid_h * grid_w, hidden_dim]`` (float64).

    The first half of the channels encodes the row coordinate and the second half
    the column; each half is ``[sin(pos * w_k), cos(pos * w_k)]`` with
    ``w_k = 10000 ** (-k / (hidden_dim / 4))``. Coordinates are ``(i / coord_divisor,
    j / coord_divisor)``, so ``coord_divisor=2`` on a doubled grid reproduces the
    base table at even indices exactly.
    """
    if hidden_dim % 4:
        raise ValueError("hidden_dim must be divisible by 4")
    if coord_divisor <= 0:
        raise ValueError("coord_divisor must be positive")
    quarter = hidden_dim // 4
    omega = 1.0 / 10000 ** (np.arange(quarter, dtype=np.float64) / quarter)
    rows = np.arange(grid_h, dtype=np.float64) / coord_divisor
    cols = np.arange(grid_w, dtype=np.float64) / coord_divisor

    def encode(pos):
        out = np.outer(pos, omega)
        return np.concatenate([np.sin(out), np.cos(out)], axis=1)

    er, ec = encode(rows), encode(cols)
    emb = np.concatenate([np.repeat(er, grid_w, axis=0), np.tile(ec, (grid_h, 1))], axis=1)
    return emb


def timestep_features(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.double()[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class PatchEmbed(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.p = spec.patch_size
        self.proj = nn.Linear(spec.channels * spec.patch_size ** 2, spec.hidden_dim)
        self.gamma: nn.Parameter | None = None

    def forward(self, x):
        x = self.proj(patchify(x, self.p))
        if self.gamma is not None:
            x = self.gamma * x
        return x


def patchify(x: torch.Tensor, p: int) -> torch.Tensor:
    """[B, C, H, W] -> [B, (H/p)*(W/p), p*p*C]; patches row-major, pixels (pi, pj, c)."""
    b, c, h, w = x.shape
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    x = x.reshape(b, c, h // p, p, w // p, p)
    return x.permute(0, 2, 4, 3, 5, 1).reshape(b, (h // p) * (w // p), p * p * c)


def depatchify(tokens: torch.Tensor, p: int, c: int, h: int, w: int) -> torch.Tensor:
    b = tokens.shape[0]
    x = tokens.reshape(b, h // p, w // p, p, p, c)
    return x.permute(0, 5, 1, 3, 2, 4).reshape(b, c, h, w)


class TimestepEmbed(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.freq_dim = spec.freq_dim
        self.fc1 = nn.Linear(spec.freq_dim, spec.hidden_dim)
        self.fc2 = nn.Linear(spec.hidden_dim, spec.hidden_dim)
        self.gamma: nn.Parameter | None = None

    def forward(self, t):
        h = timestep_features(t, self.freq_dim).to(self.fc1.weight.dtype)
        h = self.fc2(F.silu(self.fc1(h)))
        if self.gamma is not None:
            h = self.gamma * h
        return h


class LabelEmbed(nn.Module):
    """Class table with one extra row (index ``num_classes``) for the null label."""

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.num_classes = spec.num_classes
        self.table = nn.Parameter(torch.randn(spec.num_classes + 1, spec.hidden_dim) * 0.02)

    def forward(self, y):
        if y.numel() and (int(y.min()) < 0 or int(y.max()) > self.num_classes):
            raise ValueError(f"class label out of range [0, {self.num_classes}]")
        return self.table[y]


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.scale = (dim // num_heads) ** -0.5
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)
        self.gamma_qkv: nn.Parameter | None = None
        self.gamma_proj: nn.Parameter | None = None
        # LoRA on the query and value slices of the fused qkv projection
        self.lora_q_down: nn.Parameter | None = None
        self.lora_q_up: nn.Parameter | None = None
        self.lora_v_down: nn.Parameter | None = None
        self.lora_v_up: nn.Parameter | None = None

    def forward(self, x):
        b, n, c = x.shape
        if c * 3 != self.qkv.out_features:
            raise ValueError(f"token width {c} does not match attention dim {self.qkv.in_features}")
        qkv = self.qkv(x)
        if self.lora_q_up is not None:
            dq = (x @ self.lora_q_down.T) @ self.lora_q_up.T
            dv = (x @ self.lora_v_down.T) @ self.lora_v_up.T
            qkv = qkv + torch.cat([dq, torch.zeros_like(dq), dv], dim=-1)
        if self.gamma_qkv is not None:
            qkv = self.gamma_qkv * qkv
        qkv = qkv.reshape(b, n, 3, self.num_heads, c // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv.unbind(0)
        attn = ((q @ k.transpose(-2, -1)) * self.scale).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj(out)
        if self.gamma_proj is not None:
            out = self.gamma_proj * out
        return out


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x), approximate="tanh"))


class Adapter(nn.Module):
    """Bottleneck adapter; ``up`` starts at zero so attaching it is an identity."""

    def __init__(self, dim: int, bottleneck: int, mode: str):
        super().__init__()
        if mode not in ("parallel", "sequential"):
            raise ValueError(f"unknown adapter mode {mode!r}")
        self.mode = mode
        self.down = nn.Linear(dim, bottleneck)
        self.up = nn.Linear(bottleneck, dim)
        nn.init.zeros_(self.up.weight)
        nn.init.zeros_(self.up.bias)

    def forward(self, x):
        return self.up(F.gelu(self.down(x)))


class DiTBlock(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        d = spec.hidden_dim
        self.norm1 = nn.LayerNorm(d, eps=1e-6)
        self.attn = Attention(d, spec.num_heads)
        self.norm2 = nn.LayerNorm(d, eps=1e-6)
        self.mlp = Mlp(d, int(d * spec.mlp_ratio))
        self.adaLN = nn.Linear(d, 6 * d)
        self.gamma1: nn.Parameter | None = None
        self.gamma2: nn.Parameter | None = None
        self.adapter: Adapter | None = None

    def forward(self, x, cond):
        if x.shape[-1] != self.norm1.normalized_shape[0]:
            raise ValueError("token width does not match block dimension")
        shift1, scale1, gate1, shift2, scale2, gate2 = self.adaLN(F.silu(cond)).chunk(6, dim=-1)
        h = gate1.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift1, scale1))
        if self.gamma1 is not None:
            h = self.gamma1 * h
        x = x + h
        u = modulate(self.norm2(x), shift2, scale2)
        h = self.mlp(u)
        if self.adapter is not None:
            h = h + self.adapter(u if self.adapter.mode == "parallel" else h)
        h = gate2.unsqueeze(1) * h
        if self.gamma2 is not None:
            h = self.gamma2 * h
        return x + h


class FinalLayer(nn.Module):
    def __init__(self, spec: ModelSpec):
        super().__init__()
        d = spec.hidden_dim
        self.norm = nn.LayerNorm(d, eps=1e-6)
        self.adaLN = nn.Linear(d, 2 * d)
        self.linear = nn.Linear(d, spec.patch_size ** 2 * spec.out_channels)
        self.gamma: nn.Parameter | None = None

    def forward(self, x, cond):
        shift, scale = self.adaLN(F.silu(cond)).chunk(2, dim=-1)
        x = self.linear(modulate(self.norm(x), shift, scale))
        if self.gamma is not None:
            x = self.gamma * x
        return x


class DiT(nn.Module):
    def __init__(self, spec: ModelSpec = TOY_SPEC):
        super().__init__()
        self.spec = spec
        self.peft_method = None   # set by surgery that adds tensors
        self.x_embed = PatchEmbed(spec)
        self.t_embed = TimestepEmbed(spec)
        self.y_embed = LabelEmbed(spec)
        self.blocks = nn.ModuleList(DiTBlock(spec) for _ in range(spec.depth))
        self.final = FinalLayer(spec)
        self.prompts: nn.ParameterList | None = None
        pe = sincos_pos_embed(spec.grid, spec.grid, spec.hidden_dim, spec.coord_divisor)
        self.register_buffer("pos_embed", torch.from_numpy(pe)[None], persistent=False)
        self._init_weights()

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    @property
    def null_label(self) -> int:
        return self.spec.num_classes

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear):
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.t_embed.fc1.weight, std=0.02)
        nn.init.normal_(self.t_embed.fc2.weight, std=0.02)
        for blk in self.blocks:
            nn.init.zeros_(blk.adaLN.weight)
            nn.init.zeros_(blk.adaLN.bias)
        nn.init.zeros_(self.final.adaLN.weight)
        nn.init.zeros_(self.final.adaLN.bias)
        nn.init.zeros_(self.final.linear.weight)
        nn.init.zeros_(self.final.linear.bias)

    def condition(self, t, y):
        return self.t_embed(t) + self.y_embed(y)

    def forward(self, x, t, y):
        s = self.spec
        if x.ndim != 4 or tuple(x.shape[1:]) != (s.channels, s.image_size, s.image_size):
            raise ValueError(f"expected input [B, {s.channels}, {s.image_size}, {s.image_size}], "
                             f"got {tuple(x.shape)}")
        t = torch.as_tensor(t, dtype=torch.long).reshape(-1).expand(x.shape[0])
        y = torch.as_tensor(y, dtype=torch.long).reshape(-1).expand(x.shape[0])
        h = self.x_embed(x) + self.pos_embed.to(x.dtype)
        cond = self.condition(t, y)
        n_prompt_blocks = len(self.prompts) if self.prompts is not None else 0
        for i, blk in enumerate(self.blocks):
            if i < n_prompt_blocks:
                p = self.prompts[i]
                h = torch.cat([p.expand(h.shape[0], -1, -1), h], dim=1)
                h = blk(h, cond)[:, p.shape[0]:]
            else:
                h = blk(h, cond)
        out = depatchify(self.final(h, cond), s.patch_size, s.out_channels, s.image_size, s.image_size)
        if s.variance_head:
            eps, v = out.split(s.channels, dim=1)
            return eps, v
        return out, None


def named_params(model: nn.Module) -> dict[str, torch.Tensor]:
    """The model's ParamStore view: canonical name -> tensor, in registration order."""
    return dict(model.named_parameters())


def build_model(spec: ModelSpec, seed: int = 0, device: str | torch.device = "cpu",
                dtype=torch.float32) -> DiT:
    if str(device) == "meta":
        with torch.device("meta"):
            return DiT(spec).to(dtype)
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return DiT(spec).to(device=device, dtype=dtype)


def count_parameters(params, selection=None) -> tuple[int, int, float]:
    """Exact ``(trainable, total, ratio)`` element counts.

    ``params`` is a model or a name -> tensor mapping; ``selection`` is a
    :class:`~dittune.peft.SelectionPolicy` (``None`` selects everything).
    """
    if isinstance(params, nn.Module):
        params = named_params(params)
    total = sum(p.numel() for p in params.values())
    if selection is None:
        trainable = total
    else:
        trainable = sum(p.numel() for n, p in params.items() if selection.matches(n))
    return trainable, total, (trainable / total if total else 0.0)


def iter_gamma_names(names: Iterable[str]) -> list[str]:
    return [n for n in names if n.rsplit(".", 1)[-1].startswith("gamma")]
