"""Parameter selection and model surgery: freeze policies, scale-factor placement,
PEFT baselines, learning-rate policy and the fine-tuning loop."""
from __future__ import annotations

import fnmatch
import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Iterator

import torch
from torch import nn

from .diffusion import LossWeights, NoiseSchedule, loss_hybrid, q_sample
from .model import DiT, Adapter, named_params

log = logging.getLogger(__name__)

DIFFFIT_PATTERNS = ("bias", "norm", "gamma", "y_embed")
BLOCK_SITES = frozenset({"block_branches", "attn_qkv", "attn_proj", "patch_embed", "time_embed",
                         "final_layers"})
PEFT_LR_MULTIPLIER = 10.0


@dataclass(frozen=True)
class SelectionPolicy:
    """Names matching any pattern are trainable; everything else is frozen.

    A plain pattern matches as a substring of the canonical name. A pattern
    containing ``*``, ``?`` or ``[`` is a glob matched against the whole name.
    """

    patterns: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "patterns", tuple(self.patterns))

    @staticmethod
    def _match(pattern: str, name: str) -> bool:
        if any(ch in pattern for ch in "*?["):
            return fnmatch.fnmatchcase(name, pattern)
        return pattern in name

    def matches(self, name: str) -> bool:
        return any(self._match(p, name) for p in self.patterns)

    def resolve(self, names: Iterable[str]) -> list[str]:
        return [n for n in names if self.matches(n)]

    def unmatched(self, names: Iterable[str]) -> list[str]:
        names = list(names)
        return [p for p in self.patterns if not any(self._match(p, n) for n in names)]


@dataclass
class FreezeReport:
    trainable: list[str]
    frozen: list[str]
    trainable_count: int
    total_count: int
    unmatched_patterns: list[str] = field(default_factory=list)

    @property
    def ratio(self) -> float:
        return self.trainable_count / self.total_count if self.total_count else 0.0


def apply_freeze_policy(model: nn.Module, policy: SelectionPolicy) -> FreezeReport:
    params = named_params(model)
    trainable, frozen, n_train = [], [], 0
    for name, p in params.items():
        on = policy.matches(name)
        p.requires_grad_(on)
        if on:
            trainable.append(name)
            n_train += p.numel()
        else:
            frozen.append(name)
    unmatched = policy.unmatched(params)
    for pat in unmatched:
        log.warning("selection pattern %r matched no parameters", pat)
    total = sum(p.numel() for p in params.values())
    return FreezeReport(trainable, frozen, n_train, total, unmatched)


@dataclass(frozen=True)
class GammaPlacement:
    """Where scale factors go.

    ``block_range`` is an inclusive, 1-based ``(lo, hi)`` range of blocks that get
    the branch factors ``gamma1``/``gamma2``; ``None`` means no block branches.
    ``attn_range`` does the same for ``attn_qkv``/``attn_proj`` and defaults to
    every block.
    """

    block_range: tuple[int, int] | None = None
    modules: frozenset = frozenset()
    attn_range: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "modules", frozenset(self.modules))
        bad = self.modules - BLOCK_SITES
        if bad:
            raise ValueError(f"unknown gamma sites: {sorted(bad)}")

    @property
    def empty(self) -> bool:
        return not self.modules

    def to_dict(self) -> dict:
        return {"block_range": list(self.block_range) if self.block_range else None,
                "modules": sorted(self.modules),
                "attn_range": list(self.attn_range) if self.attn_range else None}

    @classmethod
    def from_dict(cls, d) -> "GammaPlacement":
        br, ar = d.get("block_range"), d.get("attn_range")
        return cls(tuple(br) if br else None, frozenset(d.get("modules", ())), tuple(ar) if ar else None)

    @classmethod
    def first_k(cls, k: int, extra: Iterable[str] = ()) -> "GammaPlacement":
        if k == 0:
            return cls(None, frozenset(extra))
        return cls((1, k), frozenset({"block_branches", *extra}))

    @classmethod
    def last_k(cls, k: int, depth: int, extra: Iterable[str] = ()) -> "GammaPlacement":
        if k == 0:
            return cls(None, frozenset(extra))
        return cls((depth - k + 1, depth), frozenset({"block_branches", *extra}))


def difffit_best_placement(depth: int) -> GammaPlacement:
    # 14 of 28 blocks in the reference model; keep the ratio for other depths
    return GammaPlacement((1, math.ceil(depth / 2)),
                          frozenset({"block_branches", "attn_qkv", "attn_proj", "final_layers"}))


def _ones_like_param(ref: torch.Tensor, n: int) -> nn.Parameter:
    return nn.Parameter(torch.ones(n, dtype=ref.dtype, device=ref.device))


def _block_indices(rng, depth: int) -> range:
    lo, hi = rng if rng else (1, depth)
    if not (1 <= lo <= hi <= depth):
        raise ValueError(f"block range {rng} outside [1, {depth}]")
    return range(lo - 1, hi)


def attach_gamma(model: DiT, placement: GammaPlacement) -> DiT:
    """Insert all-ones scale factors at the placement's sites (in place)."""
    spec = model.spec
    d = spec.hidden_dim
    ref = model.x_embed.proj.weight
    if placement.block_range is not None and "block_branches" not in placement.modules:
        raise ValueError("block_range given without the block_branches site")
    if "block_branches" in placement.modules:
        if placement.block_range is None:
            raise ValueError("block_branches requires a block_range")
        for i in _block_indices(placement.block_range, spec.depth):
            model.blocks[i].gamma1 = _ones_like_param(ref, d)
            model.blocks[i].gamma2 = _ones_like_param(ref, d)
    if placement.modules & {"attn_qkv", "attn_proj"}:
        for i in _block_indices(placement.attn_range, spec.depth):
            attn = model.blocks[i].attn
            if "attn_qkv" in placement.modules:
                attn.gamma_qkv = _ones_like_param(ref, 3 * d)
            if "attn_proj" in placement.modules:
                attn.gamma_proj = _ones_like_param(ref, d)
    if "patch_embed" in placement.modules:
        model.x_embed.gamma = _ones_like_param(ref, d)
    if "time_embed" in placement.modules:
        model.t_embed.gamma = _ones_like_param(ref, d)
    if "final_layers" in placement.modules:
        model.final.gamma = _ones_like_param(ref, model.final.linear.out_features)
    return model


def attach_lora(model: DiT, rank: int, *, seed: int = 0, init_std: float = 0.02) -> DiT:
    d = model.spec.hidden_dim
    if rank < 1 or rank > d:
        raise ValueError(f"LoRA rank must be in [1, {d}], got {rank}")
    gen = torch.Generator().manual_seed(seed)
    ref = model.x_embed.proj.weight
    for blk in model.blocks:
        attn = blk.attn
        for which in ("q", "v"):
            down = torch.randn(rank, d, generator=gen, dtype=torch.float64) * init_std
            setattr(attn, f"lora_{which}_down", nn.Parameter(down.to(ref.dtype).to(ref.device)))
            setattr(attn, f"lora_{which}_up",
                    nn.Parameter(torch.zeros(d, rank, dtype=ref.dtype, device=ref.device)))
    return model


def attach_adapter(model: DiT, mode: str, bottleneck: int | None = None, *, seed: int = 0) -> DiT:
    d = model.spec.hidden_dim
    bottleneck = bottleneck or max(1, d // 4)
    if bottleneck < 1:
        raise ValueError("bottleneck must be >= 1")
    ref = model.x_embed.proj.weight
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        for blk in model.blocks:
            blk.adapter = Adapter(d, bottleneck, mode).to(device=ref.device, dtype=ref.dtype)
    return model


def adapter_param_count(hidden: int, bottleneck: int) -> int:
    return hidden * bottleneck * 2 + bottleneck + hidden


def attach_vpt(model: DiT, prompt_depth: int = 5, num_tokens: int = 1, *, seed: int = 0,
               init_std: float = 0.02) -> DiT:
    if num_tokens < 1:
        raise ValueError("num_tokens must be >= 1")
    if not (1 <= prompt_depth <= model.spec.depth):
        raise ValueError(f"prompt_depth must be in [1, {model.spec.depth}]")
    gen = torch.Generator().manual_seed(seed)
    ref = model.x_embed.proj.weight
    model.prompts = nn.ParameterList(
        nn.Parameter((torch.randn(num_tokens, model.spec.hidden_dim, generator=gen, dtype=torch.float64)
                      * init_std).to(device=ref.device, dtype=ref.dtype))
        for _ in range(prompt_depth))
    return model


@dataclass(frozen=True)
class PEFTMethod:
    """A fine-tuning method: ``kind`` plus its hyperparameters.

    kinds: ``full``, ``bitfit``, ``difffit``, ``lora``, ``adapter``, ``vpt``,
    ``custom`` (explicit patterns and placement, used by ablations).
    """

    kind: str
    placement: GammaPlacement = GammaPlacement()
    rank: int = 0
    bottleneck: int = 0
    adapter_mode: str = "parallel"
    prompt_depth: int = 5
    num_tokens: int = 1
    patterns: tuple[str, ...] = ()
    name: str = ""

    def __post_init__(self):
        if self.kind not in ("full", "bitfit", "difffit", "lora", "adapter", "vpt", "custom"):
            raise ValueError(f"unknown method kind {self.kind!r}")
        if self.kind == "lora" and self.rank < 1:
            raise ValueError("LoRA rank must be >= 1")
        if self.kind == "adapter" and self.bottleneck < 1:
            raise ValueError("adapter bottleneck must be >= 1")
        if self.kind == "vpt" and (self.prompt_depth < 1 or self.num_tokens < 1):
            raise ValueError("VPT needs prompt_depth >= 1 and num_tokens >= 1")
        object.__setattr__(self, "patterns", tuple(self.patterns))

    @property
    def is_peft(self) -> bool:
        return self.kind != "full"

    def policy(self) -> SelectionPolicy:
        if self.patterns:
            return SelectionPolicy(self.patterns)
        return SelectionPolicy({
            "full": ("*",),
            "bitfit": ("bias",),
            "difffit": DIFFFIT_PATTERNS,
            "lora": ("lora_",),
            "adapter": ("adapter.",),
            "vpt": ("prompts.", "final."),
            "custom": (),
        }[self.kind])

    def to_dict(self) -> dict:
        return {"kind": self.kind, "placement": self.placement.to_dict(), "rank": self.rank,
                "bottleneck": self.bottleneck, "adapter_mode": self.adapter_mode,
                "prompt_depth": self.prompt_depth, "num_tokens": self.num_tokens,
                "patterns": list(self.patterns), "name": self.name}

    @classmethod
    def from_dict(cls, d) -> "PEFTMethod":
        d = dict(d)
        d["placement"] = GammaPlacement.from_dict(d.get("placement", {}))
        d["patterns"] = tuple(d.get("patterns", ()))
        return cls(**d)


PRESETS = ("full", "bitfit", "difffit", "difffit-best", "lora-r8", "lora-r16", "adapter-par",
           "adapter-seq", "vpt")


def method_preset(preset: str, depth: int, hidden_dim: int | None = None) -> PEFTMethod:
    """Resolve a preset id to a :class:`PEFTMethod` for a model of the given depth."""
    bottleneck = max(1, (hidden_dim or 64) // 4)
    if preset == "full":
        return PEFTMethod("full", name=preset)
    if preset == "bitfit":
        return PEFTMethod("bitfit", name=preset)
    if preset == "difffit":
        return PEFTMethod("difffit", GammaPlacement((1, depth), frozenset({"block_branches"})),
                          name=preset)
    if preset == "difffit-best":
        return PEFTMethod("difffit", difffit_best_placement(depth), name=preset)
    if preset in ("lora-r8", "lora-r16"):
        return PEFTMethod("lora", rank=int(preset.split("-r")[1]), name=preset)
    if preset in ("adapter-par", "adapter-seq"):
        mode = "parallel" if preset.endswith("par") else "sequential"
        return PEFTMethod("adapter", bottleneck=bottleneck, adapter_mode=mode, name=preset)
    if preset == "vpt":
        return PEFTMethod("vpt", prompt_depth=min(5, depth), num_tokens=1, name=preset)
    raise ValueError(f"unknown method preset {preset!r}; choose from {', '.join(PRESETS)}")


def apply_method(model: DiT, method: PEFTMethod, *, seed: int = 0) -> SelectionPolicy:
    """Perform the method's surgery on ``model`` and return its selection policy."""
    if not method.placement.empty:
        attach_gamma(model, method.placement)
    if method.kind == "lora":
        attach_lora(model, method.rank, seed=seed)
    elif method.kind == "adapter":
        attach_adapter(model, method.adapter_mode, method.bottleneck, seed=seed)
    elif method.kind == "vpt":
        attach_vpt(model, method.prompt_depth, method.num_tokens, seed=seed)
    if method.kind in ("lora", "adapter", "vpt") or not method.placement.empty:
        model.peft_method = method
    return method.policy()


def lr_policy(base_lr: float, method: PEFTMethod | str) -> float:
    if base_lr <= 0:
        raise ValueError("base_lr must be positive")
    kind = method if isinstance(method, str) else method.kind
    return base_lr if kind == "full" else base_lr * PEFT_LR_MULTIPLIER


def tensor_digest(t: torch.Tensor) -> str:
    return hashlib.sha256(t.detach().cpu().contiguous().numpy().tobytes()).hexdigest()


def digests(model: nn.Module, names: Iterable[str] | None = None) -> dict[str, str]:
    params = named_params(model)
    names = params.keys() if names is None else names
    return {n: tensor_digest(params[n]) for n in names}


@dataclass
class OptimizerConfig:
    lr: float = 1e-4
    weight_decay: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    grad_clip: float | None = None


@dataclass
class TrainLog:
    steps: int
    losses: list[tuple[int, float]]
    frozen_before: dict[str, str]
    frozen_after: dict[str, str]
    optimizer_state_names: list[str]

    @property
    def frozen_unchanged(self) -> bool:
        return self.frozen_before == self.frozen_after


class NonFiniteLoss(RuntimeError):
    pass


def step_generator(seed: int, step: int) -> torch.Generator:
    # per-step streams make a resumed run draw exactly what an uninterrupted one would
    return torch.Generator().manual_seed((int(seed) * 1_000_003 + int(step)) % (2 ** 63))


def training_loss(model: DiT, x0: torch.Tensor, y: torch.Tensor, schedule: NoiseSchedule,
                  gen: torch.Generator, weights: LossWeights = LossWeights(),
                  label_dropout: float = 0.1) -> torch.Tensor:
    n = x0.shape[0]
    t = torch.randint(1, schedule.T + 1, (n,), generator=gen)
    eps = torch.randn(x0.shape, generator=gen, dtype=x0.dtype)
    if label_dropout > 0:
        drop = torch.rand(n, generator=gen) < label_dropout
        y = torch.where(drop, torch.full_like(y, model.null_label), y)
    xt = q_sample(x0, t, eps, schedule)
    out = model(xt, t, y)
    if not all(torch.isfinite(o).all() for o in out if o is not None):
        raise NonFiniteLoss("model produced non-finite outputs")
    return loss_hybrid(x0, xt, t, eps, out, schedule, weights)


def train_steps(model: DiT, policy: SelectionPolicy, data_stream, optimizer_cfg: OptimizerConfig,
                steps: int, seed: int, schedule: NoiseSchedule, *, start_step: int = 0,
                weights: LossWeights = LossWeights(), log_every: int = 50,
                label_dropout: float = 0.1, callback=None) -> TrainLog:
    """Run ``steps`` AdamW updates on the tensors ``policy`` selects.

    ``data_stream(step, gen)`` returns an ``(x0, y)`` batch. ``callback(step,
    model)`` runs after each update; a truthy return value stops training early.
    Raises :class:`NonFiniteLoss` on a NaN/inf loss.
    """
    report = apply_freeze_policy(model, policy)
    params = named_params(model)
    frozen_before = digests(model, report.frozen)
    trainable = [params[n] for n in report.trainable]
    opt = None
    if trainable:
        opt = torch.optim.AdamW(trainable, lr=optimizer_cfg.lr, betas=optimizer_cfg.betas,
                                weight_decay=optimizer_cfg.weight_decay)
    losses: list[tuple[int, float]] = []
    acc, acc_n, done = 0.0, 0, 0
    model.train()
    for step in range(start_step, start_step + steps):
        gen = step_generator(seed, step)
        x0, y = data_stream(step, gen)
        loss = training_loss(model, x0, y, schedule, gen, weights, label_dropout)
        if not torch.isfinite(loss):
            raise NonFiniteLoss(f"loss became {loss.item()} at step {step}")
        if opt is not None:
            opt.zero_grad(set_to_none=True)
            loss.backward()
            if optimizer_cfg.grad_clip:
                torch.nn.utils.clip_grad_norm_(trainable, optimizer_cfg.grad_clip)
            opt.step()
        acc += loss.item()
        acc_n += 1
        done = step + 1 - start_step
        stop = callback is not None and bool(callback(step + 1, model))
        if done % log_every == 0 or done == steps or stop:
            losses.append((step + 1, acc / acc_n))
            acc, acc_n = 0.0, 0
        if stop:
            break
    model.eval()
    state_names = []
    if opt is not None:
        ids = {id(p): n for n, p in params.items()}
        state_names = sorted(ids[id(p)] for p in opt.state)
    return TrainLog(done, losses, frozen_before, digests(model, report.frozen), state_names)


def iter_batches(x: torch.Tensor, y: torch.Tensor, batch_size: int):
    """A ``data_stream`` drawing a fresh random batch (with replacement) per step."""
    n = x.shape[0]

    def stream(step: int, gen: torch.Generator):
        idx = torch.randint(0, n, (batch_size,), generator=gen)
        return x[idx], y[idx]

    return stream
