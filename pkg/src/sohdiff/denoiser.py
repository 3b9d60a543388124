"""The noise-prediction network: a 1D U-Net conditioned on early-life features.

The U-Net runs residual convolution blocks over the curve grid with
self-attention at coarse levels, strided-convolution down-sampling and
nearest-neighbor up-sampling.  A fixed cycle-position encoding is concatenated
to the first convolution's output.  Timestep and condition embeddings are
concatenated and injected additively inside every residual block.  The
condition embedding comes from a pre-norm transformer encoder over the
capacity-matrix rows; a learned null embedding stands in when the condition is
dropped or absent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from .data import N_EARLY, CapacityMatrix, FeatureStats
from .errors import ConfigurationError, ParameterError, ShapeError


@dataclass(frozen=True)
class DenoiserConfig:
    l: int = 256
    base_channels: int = 32
    channel_multipliers: tuple[int, ...] = (1, 2, 2, 4)
    attn_levels: frozenset[int] = None  # default: the two coarsest levels
    time_embed_dim: int = 128
    cond_embed_dim: int = 128
    dim_p: int = 8
    enc_layers: int = 2
    enc_heads: int = 4
    enc_d_model: int = 64
    n_feat: int = 8
    n_early: int = N_EARLY

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers", tuple(self.channel_multipliers))
        levels = len(self.channel_multipliers)
        if self.attn_levels is None:
            object.__setattr__(self, "attn_levels", frozenset(range(max(0, levels - 2), levels)))
        else:
            object.__setattr__(self, "attn_levels", frozenset(self.attn_levels))
        if levels < 1:
            raise ConfigurationError("need at least one resolution level")
        if self.l % (1 << (levels - 1)) != 0:
            raise ConfigurationError(
                f"grid length {self.l} not divisible by 2**{levels - 1}"
            )
        for name in ("l", "base_channels", "time_embed_dim", "cond_embed_dim",
                     "enc_layers", "enc_heads", "enc_d_model", "n_feat", "n_early"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")
        if self.dim_p < 1:
            raise ConfigurationError("dim_p must be positive")
        if self.time_embed_dim % 2 != 0:
            raise ConfigurationError("time_embed_dim must be even")
        if self.enc_d_model % self.enc_heads != 0:
            raise ConfigurationError(
                f"enc_d_model {self.enc_d_model} not divisible by enc_heads {self.enc_heads}"
            )
        if any(a < 0 or a >= levels for a in self.attn_levels):
            raise ConfigurationError(f"attn_levels outside 0..{levels - 1}")

    @property
    def levels(self) -> int:
        return len(self.channel_multipliers)

    @property
    def level_channels(self) -> tuple[int, ...]:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    def level_lengths(self) -> tuple[int, ...]:
        """Sequence length at each resolution level (halved per level)."""
        return tuple(self.l >> i for i in range(self.levels))

    def to_dict(self) -> dict:
        return {
            "l": self.l,
            "base_channels": self.base_channels,
            "channel_multipliers": list(self.channel_multipliers),
            "attn_levels": sorted(self.attn_levels),
            "time_embed_dim": self.time_embed_dim,
            "cond_embed_dim": self.cond_embed_dim,
            "dim_p": self.dim_p,
            "enc_layers": self.enc_layers,
            "enc_heads": self.enc_heads,
            "enc_d_model": self.enc_d_model,
            "n_feat": self.n_feat,
            "n_early": self.n_early,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DenoiserConfig":
        return cls(**{**d, "channel_multipliers": tuple(d["channel_multipliers"]),
                      "attn_levels": frozenset(d["attn_levels"])})


def timestep_embedding(t: int, dim: int, T: int) -> np.ndarray:
    """Sinusoidal timestep features [sin(t*w_k)..., cos(t*w_k)...].

    w_k = 10000**(-2k/dim).  t = 0 is allowed for the zero-phase sanity case.
    """
    if dim % 2 != 0:
        raise ConfigurationError(f"embedding dim must be even, got {dim}")
    if not 0 <= t <= T:
        raise IndexError(f"timestep {t} outside 0..{T}")
    w = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    return np.concatenate([np.sin(t * w), np.cos(t * w)])


def _timestep_embedding_rows(t: torch.Tensor, dim: int, dtype: torch.dtype) -> torch.Tensor:
    w = torch.pow(torch.tensor(10000.0, dtype=dtype),
                  -2.0 * torch.arange(dim // 2, dtype=dtype) / dim)
    args = t.to(dtype)[:, None] * w[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=-1)


def position_encoding(l: int, dim_p: int) -> np.ndarray:
    """Cycle-position channels over the grid, matrix of shape (l, dim_p).

    Channel 2m is sin(pi*k*(m+1)/l), channel 2m+1 is cos of the same phase,
    so channel 0 rises from 0 at the first grid node.
    """
    if dim_p < 1:
        raise ParameterError(f"dim_p must be >= 1, got {dim_p}")
    k = np.arange(l, dtype=np.float64)[:, None]
    chan = np.arange(dim_p)[None, :]
    phase = np.pi * k * (chan // 2 + 1) / l
    return np.where(chan % 2 == 0, np.sin(phase), np.cos(phase))


def _sequence_position_encoding(n: int, d: int) -> np.ndarray:
    """Standard interleaved sin/cos token-position encoding, shape (n, d)."""
    pos = np.arange(n, dtype=np.float64)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    enc = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def _groups(ch: int) -> int:
    return 8 if ch % 8 == 0 else 1


class ResBlock1d(nn.Module):
    """norm-silu-conv twice with additive embedding injection and a skip."""

    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv1d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv1d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv1d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(emb)[:, :, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class AttentionBlock1d(nn.Module):
    """Single-head self-attention over sequence positions, width = channels."""

    def __init__(self, ch: int):
        super().__init__()
        self.ch = ch
        self.norm = nn.GroupNorm(_groups(ch), ch)
        self.qkv = nn.Conv1d(ch, 3 * ch, 1)
        self.proj = nn.Conv1d(ch, ch, 1)

    def forward(self, x):
        q, k, v = self.qkv(self.norm(x)).chunk(3, dim=1)
        scores = torch.einsum("bcl,bcm->blm", q, k) / math.sqrt(self.ch)
        weights = torch.softmax(scores, dim=-1)
        out = torch.einsum("bcm,blm->bcl", v, weights)
        return x + self.proj(out)


class Upsample1d(nn.Module):
    def __init__(self, ch: int):
        super().__init__()
        self.conv = nn.Conv1d(ch, ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2.0, mode="nearest"))


class UNet1d(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.level_channels
        emb_dim = cfg.time_embed_dim + cfg.cond_embed_dim

        self.stem = nn.Conv1d(1, cfg.base_channels, 3, padding=1)
        pos = position_encoding(cfg.l, cfg.dim_p).T  # (dim_p, L)
        self.register_buffer("pos_enc", torch.from_numpy(pos.copy()).float())

        self.down_blocks = nn.ModuleList()
        self.down_attn = nn.ModuleList()
        self.downsamples = nn.ModuleList()
        in_ch = cfg.base_channels + cfg.dim_p
        for i, ch in enumerate(chans):
            self.down_blocks.append(ResBlock1d(in_ch, ch, emb_dim))
            self.down_attn.append(AttentionBlock1d(ch) if i in cfg.attn_levels else nn.Identity())
            if i < cfg.levels - 1:
                self.downsamples.append(nn.Conv1d(ch, ch, 3, stride=2, padding=1))
            in_ch = ch

        self.upsamples = nn.ModuleList()
        self.up_blocks = nn.ModuleList()
        self.up_attn = nn.ModuleList()
        for i in reversed(range(cfg.levels - 1)):
            self.upsamples.append(Upsample1d(chans[i + 1]))
            self.up_blocks.append(ResBlock1d(chans[i + 1] + chans[i], chans[i], emb_dim))
            self.up_attn.append(AttentionBlock1d(chans[i]) if i in cfg.attn_levels else nn.Identity())

        self.out_norm = nn.GroupNorm(_groups(chans[0]), chans[0])
        self.out_conv = nn.Conv1d(chans[0], 1, 3, padding=1)

    def forward(self, x, emb):
        # x: (batch, L); emb: (batch, time_embed_dim + cond_embed_dim)
        h = self.stem(x.unsqueeze(1))
        h = torch.cat([h, self.pos_enc.unsqueeze(0).expand(h.shape[0], -1, -1)], dim=1)
        skips = []
        for i in range(self.cfg.levels):
            h = self.down_blocks[i](h, emb)
            h = self.down_attn[i](h)
            skips.append(h)
            if i < self.cfg.levels - 1:
                h = self.downsamples[i](h)
        for j in range(self.cfg.levels - 1):
            h = self.upsamples[j](h)
            h = torch.cat([h, skips[self.cfg.levels - 2 - j]], dim=1)
            h = self.up_blocks[j](h, emb)
            h = self.up_attn[j](h)
        return self.out_conv(F.silu(self.out_norm(h))).squeeze(1)


class EncoderLayer(nn.Module):
    """Pre-norm transformer block: multi-head self-attention + 2-layer feedforward."""

    FF_MULT = 4

    def __init__(self, d: int, heads: int):
        super().__init__()
        self.heads = heads
        self.head_dim = d // heads
        self.norm1 = nn.LayerNorm(d)
        self.qkv = nn.Linear(d, 3 * d)
        self.attn_out = nn.Linear(d, d)
        self.norm2 = nn.LayerNorm(d)
        self.ff1 = nn.Linear(d, self.FF_MULT * d)
        self.ff2 = nn.Linear(self.FF_MULT * d, d)

    def forward(self, x):
        b, s, d = x.shape
        qkv = self.qkv(self.norm1(x)).reshape(b, s, 3, self.heads, self.head_dim)
        q, k, v = (qkv[:, :, i].transpose(1, 2) for i in range(3))  # (b, heads, s, hd)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        out = torch.softmax(scores, dim=-1) @ v
        out = out.transpose(1, 2).reshape(b, s, d)
        x = x + self.attn_out(out)
        x = x + self.ff2(F.silu(self.ff1(self.norm2(x))))
        return x


class ConditionEncoder(nn.Module):
    """Transformer encoder mapping capacity-matrix rows to one embedding."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.in_proj = nn.Linear(cfg.n_feat, cfg.enc_d_model)
        pe = _sequence_position_encoding(cfg.n_early, cfg.enc_d_model)
        self.register_buffer("pos_enc", torch.from_numpy(pe).float())
        self.layers = nn.ModuleList(
            EncoderLayer(cfg.enc_d_model, cfg.enc_heads) for _ in range(cfg.enc_layers)
        )
        self.out_norm = nn.LayerNorm(cfg.enc_d_model)
        self.out_proj = nn.Linear(cfg.enc_d_model, cfg.cond_embed_dim)

    def forward(self, q):
        # q: (batch, n_early, n_feat)
        h = self.in_proj(q) + self.pos_enc
        for layer in self.layers:
            h = layer(h)
        return self.out_proj(self.out_norm(h).mean(dim=1))


class CurveDenoiser(nn.Module):
    """Condition encoder + U-Net + learned null-condition embedding."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.cond_encoder = ConditionEncoder(cfg)
        self.unet = UNet1d(cfg)
        self.null_cond = nn.Parameter(torch.zeros(cfg.cond_embed_dim))

    def forward(self, x, t, cond):
        # x: (batch, L); t: (batch,) long; cond: (batch, cond_embed_dim)
        t_emb = _timestep_embedding_rows(t, self.cfg.time_embed_dim, x.dtype)
        return self.unet(x, torch.cat([t_emb, cond], dim=-1))


@dataclass
class DenoiserModel:
    """A denoiser network plus the data-space constants it was trained with."""

    config: DenoiserConfig
    net: CurveDenoiser
    norm: FeatureStats | None = None
    grid_c_max: int | None = None
    schedule_T: int | None = None
    schedule_desc: dict | None = None
    ema: dict[str, torch.Tensor] | None = None
    _eval_net: CurveDenoiser | None = field(default=None, repr=False, compare=False)

    def eval_net(self) -> CurveDenoiser:
        """Network used for all evaluation: averaged weights when available."""
        if self.ema is None:
            return self.net
        if self._eval_net is None:
            copy = CurveDenoiser(self.config).to(next(self.net.parameters()).dtype)
            state = dict(self.net.state_dict())
            state.update({k: v for k, v in self.ema.items()})
            copy.load_state_dict(state)
            copy.eval()
            self._eval_net = copy
        return self._eval_net

    def with_stats(self, **kwargs) -> "DenoiserModel":
        return replace(self, _eval_net=None, **kwargs)


def init_model(
    cfg: DenoiserConfig,
    rng: np.random.Generator,
    dtype: torch.dtype = torch.float32,
) -> DenoiserModel:
    """Deterministically initialize a model.

    Weights draw from fan-in-scaled uniform ranges, biases start at zero,
    normalization layers at identity, and the final output convolution at
    exactly zero so an untrained model predicts zero noise.
    """
    net = CurveDenoiser(cfg).to(dtype)
    gen = torch.Generator().manual_seed(int(rng.integers(2**63)))
    with torch.no_grad():
        for module in net.modules():
            if isinstance(module, (nn.Conv1d, nn.Linear)):
                fan_in = int(np.prod(module.weight.shape[1:]))
                bound = 1.0 / math.sqrt(fan_in)
                module.weight.uniform_(-bound, bound, generator=gen)
                if module.bias is not None:
                    module.bias.zero_()
            elif isinstance(module, (nn.GroupNorm, nn.LayerNorm)):
                module.weight.fill_(1.0)
                module.bias.zero_()
        bound = 1.0 / math.sqrt(cfg.cond_embed_dim)
        net.null_cond.uniform_(-bound, bound, generator=gen)
        net.unet.out_conv.weight.zero_()
        net.unet.out_conv.bias.zero_()
    return DenoiserModel(config=cfg, net=net)


def _as_condition_rows(model: DenoiserModel, q) -> np.ndarray:
    rows = q.rows if isinstance(q, CapacityMatrix) else np.asarray(q, dtype=np.float64)
    expected = (model.config.n_early, model.config.n_feat)
    if rows.shape != expected:
        raise ShapeError(f"capacity matrix shape {rows.shape}, model expects {expected}")
    if model.norm is not None:
        rows = model.norm.apply(rows)
    return rows


def encode_condition_batch(model: DenoiserModel, conds) -> torch.Tensor:
    """Encode a batch of capacity matrices to (batch, cond_embed_dim)."""
    rows = [_as_condition_rows(model, c) for c in conds]
    net = model.eval_net()
    dtype = next(net.parameters()).dtype
    batch = torch.from_numpy(np.stack(rows)).to(dtype)
    with torch.no_grad():
        return net.cond_encoder(batch)


def encode_condition(model: DenoiserModel, q) -> np.ndarray:
    """Condition embedding for one capacity matrix."""
    return encode_condition_batch(model, [q])[0].numpy()


def denoise(model: DenoiserModel, x_t: np.ndarray, t: int, cond: np.ndarray | None) -> np.ndarray:
    """Predicted noise for one model-space curve at timestep t.

    ``cond`` is a condition embedding from `encode_condition`; None selects
    the learned null embedding.
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    if x_t.shape != (model.config.l,):
        raise ShapeError(f"input shape {x_t.shape}, model expects ({model.config.l},)")
    upper = model.schedule_T if model.schedule_T is not None else t
    if not 1 <= t <= upper:
        raise IndexError(f"timestep {t} outside 1..{upper}")
    net = model.eval_net()
    dtype = next(net.parameters()).dtype
    if cond is None:
        c = net.null_cond.detach().unsqueeze(0)
    else:
        cond = np.asarray(cond)
        if cond.shape != (model.config.cond_embed_dim,):
            raise ShapeError(
                f"condition shape {cond.shape}, model expects ({model.config.cond_embed_dim},)"
            )
        c = torch.from_numpy(cond).to(dtype).unsqueeze(0)
    with torch.no_grad():
        out = net(torch.from_numpy(x_t).to(dtype).unsqueeze(0),
                  torch.tensor([t], dtype=torch.long), c)
    return out[0].numpy()


def count_parameters(cfg: DenoiserConfig) -> int:
    """Closed-form parameter count for a config.

    Sums, in construction order: the U-Net stem; per level a residual block
    (two norms, two convolutions, the embedding projection, and a 1x1 skip
    when widths differ) plus optional attention (norm, fused qkv, output
    projection) and the strided down-sampling convolution; the mirrored up
    path with nearest-neighbor upsample convolutions and concatenated skip
    widths; the output norm + convolution; the condition encoder (input
    projection, per layer two layer-norms, fused qkv, attention output, and
    the two feedforward linears, then the final norm and output projection);
    and the null-condition embedding.
    """
    chans = cfg.level_channels
    emb = cfg.time_embed_dim + cfg.cond_embed_dim

    def conv(cin, cout, k):
        return cout * cin * k + cout

    def res(cin, cout):
        n = 2 * cin + conv(cin, cout, 3) + (emb * cout + cout) + 2 * cout + conv(cout, cout, 3)
        if cin != cout:
            n += conv(cin, cout, 1)
        return n

    def attn(ch):
        return 2 * ch + conv(ch, 3 * ch, 1) + conv(ch, ch, 1)

    total = conv(1, cfg.base_channels, 3)
    in_ch = cfg.base_channels + cfg.dim_p
    for i, ch in enumerate(chans):
        total += res(in_ch, ch)
        if i in cfg.attn_levels:
            total += attn(ch)
        if i < cfg.levels - 1:
            total += conv(ch, ch, 3)
        in_ch = ch
    for i in reversed(range(cfg.levels - 1)):
        total += conv(chans[i + 1], chans[i + 1], 3)
        total += res(chans[i + 1] + chans[i], chans[i])
        if i in cfg.attn_levels:
            total += attn(chans[i])
    total += 2 * chans[0] + conv(chans[0], 1, 3)

    d = cfg.enc_d_model
    total += cfg.n_feat * d + d
    per_layer = (2 * d) + (d * 3 * d + 3 * d) + (d * d + d) + (2 * d) \
        + (d * EncoderLayer.FF_MULT * d + EncoderLayer.FF_MULT * d) \
        + (EncoderLayer.FF_MULT * d * d + d)
    total += cfg.enc_layers * per_layer
    total += 2 * d
    total += d * cfg.cond_embed_dim + cfg.cond_embed_dim
    total += cfg.cond_embed_dim
    return total
