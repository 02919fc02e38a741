"""Mask-conditioned 3D U-Net noise predictor.

Anatomy one-hot channels and the lymph-node mask are concatenated with the noisy
image at the input. The lymph-node mask is additionally encoded into a token
sequence and injected through spatial-transformer blocks at a single feature
resolution, whose output is added back only at lymph-node positions (mode "LD").
"""
from __future__ import annotations

import copy
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

ATTENTION_MODES = ("LD", "LA", "GA")


@dataclass
class DenoiserConfig:
    patch_shape: tuple = (32, 32, 32)
    base_channels: int = 32
    channel_multipliers: tuple = (1, 2, 4)
    anatomy_channels: int = 14
    attention_resolution: int = 8
    time_embed_dim: int | None = None
    attention_mode: str = "LD"
    num_heads: int = 4
    context_dim: int = 64
    num_res_blocks: int = 1
    norm_groups: int = 8
    # ablation switches: input concatenation of the node mask / anatomy, and the
    # cross-attention branch
    gs_ln_mask: bool = True
    gs_anatomy: bool = True
    ld_cond: bool = True

    def __post_init__(self):
        self.patch_shape = tuple(int(v) for v in self.patch_shape)
        self.channel_multipliers = tuple(int(v) for v in self.channel_multipliers)
        if self.time_embed_dim is None:
            self.time_embed_dim = 4 * self.base_channels
        self.validate()

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def attention_level(self) -> int | None:
        """Index of the U-Net level whose grid edge equals ``attention_resolution``."""
        for lvl in range(self.levels):
            if all(n == self.attention_resolution * 2 ** lvl for n in self.patch_shape):
                return lvl
        return None

    @property
    def in_channels(self) -> int:
        return 1 + (self.anatomy_channels if self.gs_anatomy else 0) + (1 if self.gs_ln_mask else 0)

    def channels_at(self, level: int) -> int:
        return self.base_channels * self.channel_multipliers[level]

    def validate(self) -> None:
        if len(self.patch_shape) != 3 or any(n < 1 for n in self.patch_shape):
            raise ValueError(f"patch_shape must be three positive ints, got {self.patch_shape}")
        if self.levels < 1:
            raise ValueError("channel_multipliers must be non-empty")
        factor = 2 ** (self.levels - 1)
        if any(n % factor for n in self.patch_shape):
            raise ValueError(f"patch_shape {self.patch_shape} not divisible by {factor}")
        if self.anatomy_channels < 1:
            raise ValueError("anatomy_channels must be >= 1")
        if self.attention_mode not in ATTENTION_MODES:
            raise ValueError(f"attention_mode must be one of {ATTENTION_MODES}")
        if self.ld_cond:
            lvl = self.attention_level
            if lvl is None:
                raise ValueError(
                    f"attention_resolution {self.attention_resolution} is not reached by "
                    f"downsampling patch {self.patch_shape} over {self.levels} levels")
            ch = self.channels_at(lvl)
            if ch % self.num_heads:
                raise ValueError(f"{ch} channels at the attention level not divisible by {self.num_heads} heads")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["patch_shape"] = list(self.patch_shape)
        d["channel_multipliers"] = list(self.channel_multipliers)
        return d


def _groups(channels: int, wanted: int) -> int:
    return math.gcd(channels, wanted)


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, temb_dim: int | None, groups: int = 8):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch, groups), in_ch)
        self.conv1 = nn.Conv3d(in_ch, out_ch, 3, padding=1)
        self.temb = nn.Linear(temb_dim, out_ch) if temb_dim else None
        self.norm2 = nn.GroupNorm(_groups(out_ch, groups), out_ch)
        self.conv2 = nn.Conv3d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv3d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(F.silu(temb))[:, :, None, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Downsample(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv3d(ch, ch, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv3d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


class Attention(nn.Module):
    """Multi-head dot-product attention with optional key/query restriction.

    ``pos_mask`` (B, N) restricts which key positions can be attended and which
    query positions receive an update; queries outside the mask get zero.
    """

    def __init__(self, dim: int, heads: int, context_dim: int | None = None):
        super().__init__()
        context_dim = context_dim or dim
        self.heads = heads
        self.scale = (dim // heads) ** -0.5
        self.to_q = nn.Linear(dim, dim, bias=False)
        self.to_k = nn.Linear(context_dim, dim, bias=False)
        self.to_v = nn.Linear(context_dim, dim, bias=False)
        self.to_out = nn.Linear(dim, dim)

    def forward(self, x, context=None, pos_mask=None):
        context = x if context is None else context
        B, N, D = x.shape
        q = self.to_q(x).view(B, N, self.heads, -1).transpose(1, 2)
        k = self.to_k(context).view(B, context.shape[1], self.heads, -1).transpose(1, 2)
        v = self.to_v(context).view(B, context.shape[1], self.heads, -1).transpose(1, 2)
        scores = (q @ k.transpose(-1, -2)) * self.scale
        if pos_mask is not None:
            keep = pos_mask[:, None, None, :]
            scores = scores.masked_fill(~keep, float("-inf"))
            weights = torch.softmax(scores, dim=-1)
            # all keys masked -> softmax is NaN; those rows contribute nothing
            weights = torch.where(keep.any(-1, keepdim=True), weights, torch.zeros_like(weights))
        else:
            weights = torch.softmax(scores, dim=-1)
        out = (weights @ v).transpose(1, 2).reshape(B, N, D)
        out = self.to_out(out)
        if pos_mask is not None:
            out = out * pos_mask[..., None].to(out.dtype)
        return out


class SpatialTransformer(nn.Module):
    """Self-attention, cross-attention onto mask tokens, feed-forward; zero-initialised output projection."""

    def __init__(self, channels: int, context_dim: int, heads: int, groups: int = 8):
        super().__init__()
        self.norm = nn.GroupNorm(_groups(channels, groups), channels)
        self.proj_in = nn.Linear(channels, channels)
        self.norm1 = nn.LayerNorm(channels)
        self.attn1 = Attention(channels, heads)
        self.norm2 = nn.LayerNorm(channels)
        self.attn2 = Attention(channels, heads, context_dim)
        self.norm3 = nn.LayerNorm(channels)
        self.ff = nn.Sequential(nn.Linear(channels, 4 * channels), nn.GELU(), nn.Linear(4 * channels, channels))
        self.proj_out = nn.Linear(channels, channels)
        nn.init.zeros_(self.proj_out.weight)
        nn.init.zeros_(self.proj_out.bias)

    def branch(self, h, tokens, pos_mask=None):
        """The transformer output ST(h), same shape as ``h``."""
        B, C = h.shape[:2]
        x = self.norm(h).flatten(2).transpose(1, 2)
        x = self.proj_in(x)
        x = x + self.attn1(self.norm1(x), pos_mask=pos_mask)
        x = x + self.attn2(self.norm2(x), context=tokens, pos_mask=pos_mask)
        x = x + self.ff(self.norm3(x))
        return self.proj_out(x).transpose(1, 2).reshape(h.shape)

    def forward(self, h, tokens, gate, mode: str = "LD"):
        """``gate`` is a (B, r, r, r) binary grid at the resolution of ``h``."""
        if gate.shape[-3:] != h.shape[-3:]:
            raise ValueError(f"gate grid {tuple(gate.shape[-3:])} != feature grid {tuple(h.shape[-3:])}")
        if mode == "LD":
            return h + gate[:, None].to(h.dtype) * self.branch(h, tokens)
        if mode == "GA":
            return h + self.branch(h, tokens)
        if mode == "LA":
            return h + self.branch(h, tokens, pos_mask=gate.flatten(1).bool())
        raise ValueError(f"unknown attention mode {mode!r}")


class MaskEncoder(nn.Module):
    """Strided convolutions from the patch grid down to the attention grid, one token per cell."""

    def __init__(self, downsamples: int, context_dim: int, width: int = 16):
        super().__init__()
        layers = [nn.Conv3d(1, width, 3, padding=1), nn.SiLU()]
        ch = width
        for _ in range(downsamples):
            nxt = min(2 * ch, context_dim)
            layers += [nn.Conv3d(ch, nxt, 3, stride=2, padding=1), nn.SiLU()]
            ch = nxt
        self.body = nn.Sequential(*layers)
        self.out = nn.Conv3d(ch, context_dim, 1)

    def forward(self, ln_mask):
        feat = self.out(self.body(ln_mask))
        return feat.flatten(2).transpose(1, 2)


class UNet3D(nn.Module):
    def __init__(self, cfg: DenoiserConfig, in_channels: int | None = None, out_channels: int = 1,
                 time_conditioned: bool = True, with_transformer: bool | None = None):
        super().__init__()
        self.cfg = cfg
        g = cfg.norm_groups
        temb = cfg.time_embed_dim if time_conditioned else None
        in_channels = cfg.in_channels if in_channels is None else in_channels
        use_st = cfg.ld_cond if with_transformer is None else with_transformer
        self.att_level = cfg.attention_level if use_st else None
        last = cfg.levels - 1

        if time_conditioned:
            self.time_mlp = nn.Sequential(nn.Linear(cfg.base_channels, temb), nn.SiLU(), nn.Linear(temb, temb))
        else:
            self.time_mlp = None

        def st(level):
            if level != self.att_level:
                return None
            return SpatialTransformer(cfg.channels_at(level), cfg.context_dim, cfg.num_heads, g)

        self.conv_in = nn.Conv3d(in_channels, cfg.base_channels, 3, padding=1)
        self.enc_blocks, self.enc_st, self.downs = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        prev = cfg.base_channels
        for lvl in range(cfg.levels):
            ch = cfg.channels_at(lvl)
            blocks = [ResBlock(prev if i == 0 else ch, ch, temb, g) for i in range(cfg.num_res_blocks)]
            self.enc_blocks.append(nn.ModuleList(blocks))
            self.enc_st.append(st(lvl) or nn.Identity())
            self.downs.append(Downsample(ch) if lvl < last else nn.Identity())
            prev = ch

        ch = cfg.channels_at(last)
        self.mid1 = ResBlock(ch, ch, temb, g)
        self.mid_st = st(last) or nn.Identity()
        self.mid2 = ResBlock(ch, ch, temb, g)

        self.dec_blocks, self.dec_st, self.ups = nn.ModuleList(), nn.ModuleList(), nn.ModuleList()
        for lvl in reversed(range(cfg.levels)):
            ch = cfg.channels_at(lvl)
            blocks = [ResBlock(2 * ch if i == 0 else ch, ch, temb, g) for i in range(cfg.num_res_blocks)]
            self.dec_blocks.append(nn.ModuleList(blocks))
            self.dec_st.append(st(lvl) or nn.Identity())
            self.ups.append(Upsample(ch, cfg.channels_at(lvl - 1)) if lvl > 0 else nn.Identity())

        self.norm_out = nn.GroupNorm(_groups(cfg.base_channels, g), cfg.base_channels)
        self.conv_out = nn.Conv3d(cfg.base_channels, out_channels, 3, padding=1)

        self.mask_encoder = MaskEncoder(self.att_level, cfg.context_dim) if self.att_level is not None else None

    def _st(self, module, h, tokens, gate, mode, zero_transformer):
        if isinstance(module, nn.Identity) or zero_transformer:
            return h
        return module(h, tokens, gate, mode)

    def forward(self, x, t=None, ln_mask=None, zero_transformer: bool = False):
        """``x`` is the already-assembled network input (B, in_channels, *patch)."""
        temb = None
        if self.time_mlp is not None:
            temb = self.time_mlp(timestep_embedding(t, self.cfg.base_channels).to(x.dtype))
        tokens = gate = None
        if self.att_level is not None and not zero_transformer:
            if ln_mask is None:
                raise ValueError("ln_mask is required when the transformer branch is enabled")
            m = ln_mask.to(x.dtype)
            tokens = self.mask_encoder(m)
            k = 2 ** self.att_level
            gate = F.max_pool3d(m, kernel_size=k, stride=k)[:, 0] if k > 1 else m[:, 0]
        mode = self.cfg.attention_mode

        h = self.conv_in(x)
        skips = []
        for blocks, st_mod, down in zip(self.enc_blocks, self.enc_st, self.downs):
            for b in blocks:
                h = b(h, temb)
            h = self._st(st_mod, h, tokens, gate, mode, zero_transformer)
            skips.append(h)
            h = down(h)
        h = self.mid1(h, temb)
        h = self._st(self.mid_st, h, tokens, gate, mode, zero_transformer)
        h = self.mid2(h, temb)
        for blocks, st_mod, up in zip(self.dec_blocks, self.dec_st, self.ups):
            h = torch.cat([h, skips.pop()], dim=1)
            for b in blocks:
                h = b(h, temb)
            h = self._st(st_mod, h, tokens, gate, mode, zero_transformer)
            h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


# --- functional surface ---------------------------------------------------------

def _as_tensor(a, dtype=None):
    t = a if isinstance(a, torch.Tensor) else torch.as_tensor(np.asarray(a))
    return t.to(dtype) if dtype is not None else t


def assemble_input(x_t, anatomy_onehot, ln_mask) -> torch.Tensor:
    """Concatenate ``[x_t | anatomy channels 1..C | ln_mask]`` along the channel axis.

    Accepts unbatched (grid / C x grid) or batched (B x ch x grid) tensors or arrays.
    """
    x_t = _as_tensor(x_t)
    dtype = x_t.dtype if x_t.is_floating_point() else torch.float32
    x_t = x_t.to(dtype)
    a = _as_tensor(anatomy_onehot, dtype)
    m = _as_tensor(ln_mask, dtype)
    batched = a.ndim == 5
    if not batched:
        if a.ndim != 4:
            raise ValueError(f"anatomy must be (C, H, W, D) or (B, C, H, W, D), got {tuple(a.shape)}")
        a = a[None]
        x_t = x_t.reshape(1, 1, *x_t.shape[-3:]) if x_t.ndim in (3, 4) else x_t
        m = m.reshape(1, 1, *m.shape[-3:]) if m.ndim in (3, 4) else m
    if x_t.ndim == 4:
        x_t = x_t[:, None]
    if m.ndim == 4:
        m = m[:, None]
    grid = tuple(a.shape[-3:])
    for name, v in (("x_t", x_t), ("ln_mask", m)):
        if v.ndim != 5 or v.shape[1] != 1:
            raise ValueError(f"{name} must be single-channel, got {tuple(v.shape)}")
        if tuple(v.shape[-3:]) != grid or v.shape[0] != a.shape[0]:
            raise ValueError(f"{name} shape {tuple(v.shape)} does not match anatomy {tuple(a.shape)}")
    out = torch.cat([x_t, a, m], dim=1)
    return out if batched else out[0]


def gate_mask_from_lnmask(ln_mask, target_resolution) -> np.ndarray:
    """Max-pool a binary mask: a coarse cell is 1 iff any fine voxel it covers is 1."""
    m = np.asarray(ln_mask)
    if m.size and not np.isin(m, (0, 1)).all():
        raise ValueError("ln_mask must be binary")
    target = tuple(int(v) for v in target_resolution)
    if len(target) != 3 or any(n <= 0 or s % n for s, n in zip(m.shape, target)):
        raise ValueError(f"target resolution {target_resolution} is not an integer divisor of {m.shape}")
    f = [s // n for s, n in zip(m.shape, target)]
    blocks = m.reshape(target[0], f[0], target[1], f[1], target[2], f[2])
    return blocks.any(axis=(1, 3, 5)).astype(np.uint8)


def encode_mask(c_m, state_or_model, use_ema: bool = True) -> torch.Tensor:
    """Token sequence (N, context_dim) for one binary mask of patch shape; (B, N, context_dim) if batched."""
    model = state_or_model.network(use_ema) if isinstance(state_or_model, DenoiserState) else state_or_model
    if model.mask_encoder is None:
        raise ValueError("this configuration has no mask encoder (ld_cond is off)")
    m = _as_tensor(c_m)
    if m.numel() and not torch.isin(m, torch.tensor([0, 1], dtype=m.dtype)).all():
        raise ValueError("mask must be binary {0, 1}")
    batched = m.ndim == 5
    if m.ndim == 3:
        m = m[None, None]
    elif m.ndim == 4:
        m = m[None]
    if tuple(m.shape[-3:]) != model.cfg.patch_shape:
        raise ValueError(f"mask grid {tuple(m.shape[-3:])} != configured patch {model.cfg.patch_shape}")
    tokens = model.mask_encoder(m.to(next(model.parameters()).dtype))
    return tokens if batched else tokens[0]


def spatial_transformer_block(block: SpatialTransformer, h, mask_tokens, gate_mask, mode: str = "LD"):
    """Apply ``block`` to an unbatched (C, r, r, r) or batched feature grid."""
    batched = h.ndim == 5
    if not batched:
        h, mask_tokens, gate_mask = h[None], mask_tokens[None], _as_tensor(gate_mask)[None]
    out = block(h, mask_tokens, _as_tensor(gate_mask), mode)
    return out if batched else out[0]


@dataclass
class DenoiserState:
    config: DenoiserConfig
    model: UNet3D
    ema_model: UNet3D
    iteration: int = 0
    optimizer_state: dict | None = None
    extra: dict = field(default_factory=dict)

    @classmethod
    def create(cls, config: DenoiserConfig, seed: int = 0, dtype=torch.float32) -> "DenoiserState":
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed)
            model = UNet3D(config).to(dtype)
        ema = copy.deepcopy(model)
        for p in ema.parameters():
            p.requires_grad_(False)
        return cls(config=config, model=model, ema_model=ema)

    def network(self, use_ema: bool = True) -> UNet3D:
        return self.ema_model if use_ema else self.model

    def parameter_inventory(self) -> dict[str, tuple]:
        return {k: tuple(v.shape) for k, v in self.model.state_dict().items()}


def prepare_inputs(config: DenoiserConfig, x_t, condition_anatomy, ln_mask):
    """Build the network input for ``config`` and check it against the configured patch."""
    full = assemble_input(x_t, condition_anatomy, ln_mask)
    if full.ndim == 4:
        full = full[None]
    C = config.anatomy_channels
    if full.shape[1] != C + 2:
        raise ValueError(f"condition has {full.shape[1] - 2} anatomy channels, config expects {C}")
    if tuple(full.shape[-3:]) != config.patch_shape:
        raise ValueError(f"input grid {tuple(full.shape[-3:])} != configured patch {config.patch_shape}")
    keep = [0]
    if config.gs_anatomy:
        keep += list(range(1, C + 1))
    if config.gs_ln_mask:
        keep.append(C + 1)
    x = full[:, keep] if len(keep) != C + 2 else full
    return x, full[:, C + 1:C + 2]


def forward(state_or_model, x_t, condition, t, use_ema: bool = True, zero_transformer: bool = False):
    """Predict noise for ``x_t`` (B, 1, *patch) under ``condition`` at 1-based timestep(s) ``t``.

    ``condition`` is a ConditionStack or a pair of tensors ``(anatomy (B, C, ...), ln_mask (B, 1, ...))``.
    """
    if isinstance(state_or_model, DenoiserState):
        model = state_or_model.network(use_ema)
    else:
        model = state_or_model
    cfg = model.cfg
    if hasattr(condition, "anatomy_onehot"):
        anatomy, ln = condition.anatomy_onehot, condition.ln_mask
    else:
        anatomy, ln = condition
    x_t = _as_tensor(x_t)
    dtype = next(model.parameters()).dtype
    x_t = x_t.to(dtype)
    if x_t.ndim == 3:
        x_t = x_t[None, None]
    anatomy = _as_tensor(anatomy, dtype)
    ln = _as_tensor(ln, dtype)
    if anatomy.ndim == 4:
        anatomy = anatomy[None].expand(x_t.shape[0], *anatomy.shape)
    if ln.ndim == 3:
        ln = ln[None, None]
    elif ln.ndim == 4:
        ln = ln[None]
    if ln.shape[0] != x_t.shape[0]:
        ln = ln.expand(x_t.shape[0], *ln.shape[1:])
    try:
        x, m = prepare_inputs(cfg, x_t, anatomy, ln)
    except ValueError as exc:
        raise ValueError(f"input assembly: {exc}") from exc
    t = torch.as_tensor(t, dtype=torch.long).reshape(-1)
    if t.numel() == 1 and x.shape[0] > 1:
        t = t.expand(x.shape[0])
    return model(x, t, m, zero_transformer=zero_transformer)
