"""Dimension-free pyramid U-like Transformer (MiT).

One set of Transformer weights serves both 2D images and 3D volumes. Only the
patch embeddings, the spatial-reduction convolutions and the positional
embeddings are dimension specific; their parameter names end in ``_2d`` or
``_3d``.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .config import MiTConfig, StageConfig


class ShapeError(ValueError):
    pass


class DimTag(str, enum.Enum):
    D2 = "2d"
    D3 = "3d"

    def __str__(self) -> str:
        return self.value

    @property
    def ndim(self) -> int:
        return 2 if self is DimTag.D2 else 3

    @classmethod
    def of(cls, x: Tensor) -> "DimTag":
        if x.dim() == 4:
            return cls.D2
        if x.dim() == 5:
            return cls.D3
        raise ShapeError(f"expected a [B,C,H,W] or [B,C,D,H,W] tensor, got shape {tuple(x.shape)}")


AXIS_NAMES = {2: ("height", "width"), 3: ("depth", "height", "width")}


def _check_rank(x: Tensor, dim_tag: DimTag, spatial_only: bool = False) -> None:
    want = dim_tag.ndim + (0 if spatial_only else 2)
    if x.dim() != want:
        raise ShapeError(f"dim_tag {dim_tag} expects rank {want}, got shape {tuple(x.shape)}")


@dataclass
class TokenSequence:
    tokens: Tensor  # [B, L, C]
    dim_tag: DimTag
    spatial_extents: tuple[int, ...]
    has_ssl_token: bool = False

    def __post_init__(self):
        self.spatial_extents = tuple(int(e) for e in self.spatial_extents)
        if len(self.spatial_extents) != self.dim_tag.ndim:
            raise ShapeError(f"{self.dim_tag} sequence needs {self.dim_tag.ndim} extents, got {self.spatial_extents}")
        want = math.prod(self.spatial_extents) + int(self.has_ssl_token)
        if self.tokens.dim() != 3 or self.tokens.shape[1] != want:
            raise ShapeError(f"token tensor {tuple(self.tokens.shape)} does not match extents "
                             f"{self.spatial_extents} (ssl token: {self.has_ssl_token})")

    # SSL token lives at index 0
    def split(self) -> tuple[Tensor | None, Tensor]:
        if self.has_ssl_token:
            return self.tokens[:, :1], self.tokens[:, 1:]
        return None, self.tokens

    def with_tokens(self, tokens: Tensor) -> "TokenSequence":
        return TokenSequence(tokens, self.dim_tag, self.spatial_extents, self.has_ssl_token)

    def to_map(self) -> Tensor:
        _, patches = self.split()
        b, _, c = patches.shape
        return patches.transpose(1, 2).reshape(b, c, *self.spatial_extents)

    @classmethod
    def from_map(cls, x: Tensor, dim_tag: DimTag, ssl_token: Tensor | None = None) -> "TokenSequence":
        tokens = x.flatten(2).transpose(1, 2)
        if ssl_token is not None:
            tokens = torch.cat([ssl_token.expand(x.shape[0], -1, -1), tokens], dim=1)
        return cls(tokens, dim_tag, tuple(x.shape[2:]), ssl_token is not None)


@dataclass
class StageOutput:
    feature_map: Tensor
    ssl_token: Tensor | None = None


class SwitchablePatchEmbed(nn.Module):
    """Stride-2 conv (down) or transpose conv (up), with separate 2D and 3D weights."""

    def __init__(self, in_chans: int, embed_dim: int, direction: str = "down"):
        super().__init__()
        if direction not in ("down", "up"):
            raise ValueError(f"direction must be 'down' or 'up', got {direction!r}")
        self.direction = direction
        if direction == "down":
            self.proj_2d = nn.Conv2d(in_chans, embed_dim, kernel_size=4, stride=2, padding=1)
            self.proj_3d = nn.Conv3d(in_chans, embed_dim, kernel_size=4, stride=2, padding=1)
        else:
            self.proj_2d = nn.ConvTranspose2d(in_chans, embed_dim, kernel_size=2, stride=2)
            self.proj_3d = nn.ConvTranspose3d(in_chans, embed_dim, kernel_size=2, stride=2)

    def forward(self, x: Tensor, dim_tag: DimTag | None = None) -> Tensor:
        dim_tag = DimTag.of(x) if dim_tag is None else DimTag(dim_tag)
        _check_rank(x, dim_tag)
        if self.direction == "down":
            for axis, extent in zip(AXIS_NAMES[dim_tag.ndim], x.shape[2:]):
                if extent % 2:
                    raise ShapeError(f"patch embedding needs even extents; {axis} is {extent}")
        proj = self.proj_2d if dim_tag is DimTag.D2 else self.proj_3d
        return proj(x)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, num_heads: int) -> Tensor:
    """Scaled dot-product attention over already-projected [B, L, C] inputs."""
    b, lq, c = q.shape
    hd = c // num_heads
    q = q.reshape(b, lq, num_heads, hd).transpose(1, 2)
    k = k.reshape(b, k.shape[1], num_heads, hd).transpose(1, 2)
    v = v.reshape(b, v.shape[1], num_heads, hd).transpose(1, 2)
    attn = (q @ k.transpose(-2, -1)) * hd ** -0.5
    attn = attn.softmax(dim=-1)
    return (attn @ v).transpose(1, 2).reshape(b, lq, c)


class SpatialReductionAttention(nn.Module):
    """MSA whose keys and values are spatially reduced by a strided conv of kernel = stride = R."""

    def __init__(self, dim: int, num_heads: int, reduction_2d: int = 1, reduction_3d: int = 1):
        super().__init__()
        if dim % num_heads:
            raise ValueError(f"dim {dim} not divisible by num_heads {num_heads}")
        self.dim = dim
        self.num_heads = num_heads
        self.reduction = {DimTag.D2: reduction_2d, DimTag.D3: reduction_3d}
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.proj = nn.Linear(dim, dim)
        if reduction_2d > 1:
            self.sr_2d = nn.Conv2d(dim, dim, kernel_size=reduction_2d, stride=reduction_2d)
            self.sr_norm_2d = nn.LayerNorm(dim)
        if reduction_3d > 1:
            self.sr_3d = nn.Conv3d(dim, dim, kernel_size=reduction_3d, stride=reduction_3d)
            self.sr_norm_3d = nn.LayerNorm(dim)

    def reduce(self, seq: TokenSequence) -> TokenSequence:
        r = self.reduction[seq.dim_tag]
        if r == 1:
            return seq
        for axis, extent in zip(AXIS_NAMES[seq.dim_tag.ndim], seq.spatial_extents):
            if extent % r:
                raise ShapeError(f"SRA reduction ratio {r} does not divide {axis} extent {extent}")
        ssl, _ = seq.split()
        suffix = "_2d" if seq.dim_tag is DimTag.D2 else "_3d"
        reduced = getattr(self, "sr" + suffix)(seq.to_map())
        tokens = getattr(self, "sr_norm" + suffix)(reduced.flatten(2).transpose(1, 2))
        if ssl is not None:
            tokens = torch.cat([ssl, tokens], dim=1)
        return TokenSequence(tokens, seq.dim_tag, tuple(reduced.shape[2:]), seq.has_ssl_token)

    def forward(self, q: TokenSequence, k: TokenSequence | None = None, v: TokenSequence | None = None) -> TokenSequence:
        k = q if k is None else k
        v = k if v is None else v
        if k.spatial_extents != v.spatial_extents or k.has_ssl_token != v.has_ssl_token:
            raise ShapeError("keys and values must share length and spatial extents")
        if k.has_ssl_token and not q.has_ssl_token:
            raise ShapeError("SSL token present in keys/values but absent from queries")
        if not (q.dim_tag == k.dim_tag == v.dim_tag):
            raise ShapeError("q, k and v must share a dim_tag")
        k_red = self.reduce(k)
        v_red = k_red if v is k else self.reduce(v)
        out = multi_head_attention(self.q(q.tokens), self.k(k_red.tokens), self.v(v_red.tokens), self.num_heads)
        return q.with_tokens(self.proj(out))


class FeedForward(nn.Module):
    def __init__(self, dim: int, expansion: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, dim * expansion)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(dim * expansion, dim)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(self.act(self.fc1(x)))


class TransformerBlock(nn.Module):
    def __init__(self, stage: StageConfig):
        super().__init__()
        self.dim = stage.embed_dim
        self.norm1 = nn.LayerNorm(stage.embed_dim)
        self.attn = SpatialReductionAttention(stage.embed_dim, stage.num_heads,
                                              stage.sra_reduction_2d, stage.sra_reduction_3d)
        self.norm2 = nn.LayerNorm(stage.embed_dim)
        self.mlp = FeedForward(stage.embed_dim, stage.ffn_expansion)

    def forward(self, seq: TokenSequence) -> TokenSequence:
        if seq.tokens.shape[-1] != self.dim:
            raise ShapeError(f"block expects token dim {self.dim}, got {seq.tokens.shape[-1]}")
        x = seq.tokens + self.attn(seq.with_tokens(self.norm1(seq.tokens))).tokens
        x = x + self.mlp(self.norm2(x))
        return seq.with_tokens(x)


def _interp_pos(pos: Tensor, extents: tuple[int, ...]) -> Tensor:
    if tuple(pos.shape[2:]) == tuple(extents):
        return pos
    mode = "bilinear" if len(extents) == 2 else "trilinear"
    return F.interpolate(pos, size=extents, mode=mode, align_corners=False)


class EncoderStage(nn.Module):
    def __init__(self, in_chans: int, stage: StageConfig, grid_2d: tuple[int, ...], grid_3d: tuple[int, ...]):
        super().__init__()
        self.stage = stage
        self.embed = SwitchablePatchEmbed(in_chans, stage.embed_dim, "down")
        self.embed_norm = nn.LayerNorm(stage.embed_dim)
        self.ssl_token = nn.Parameter(torch.zeros(1, 1, stage.embed_dim))
        self.pos_embed_2d = nn.Parameter(torch.zeros(1, stage.embed_dim, *grid_2d))
        self.pos_embed_3d = nn.Parameter(torch.zeros(1, stage.embed_dim, *grid_3d))
        self.blocks = nn.ModuleList(TransformerBlock(stage) for _ in range(stage.depth))
        for p in (self.ssl_token, self.pos_embed_2d, self.pos_embed_3d):
            nn.init.trunc_normal_(p, std=0.02)

    def forward(self, x: Tensor, dim_tag: DimTag) -> TokenSequence:
        fmap = self.embed(x, dim_tag)
        pos = self.pos_embed_2d if dim_tag is DimTag.D2 else self.pos_embed_3d
        fmap_tokens = self.embed_norm(fmap.flatten(2).transpose(1, 2))
        pos_tokens = _interp_pos(pos, tuple(fmap.shape[2:])).flatten(2).transpose(1, 2)
        tokens = torch.cat([self.ssl_token.expand(x.shape[0], -1, -1), fmap_tokens + pos_tokens], dim=1)
        seq = TokenSequence(tokens, dim_tag, tuple(fmap.shape[2:]), has_ssl_token=True)
        for blk in self.blocks:
            seq = blk(seq)
        return seq


class DecoderStage(nn.Module):
    def __init__(self, in_dim: int, stage: StageConfig):
        super().__init__()
        self.embed = SwitchablePatchEmbed(in_dim, stage.embed_dim, "up")
        self.embed_norm = nn.LayerNorm(stage.embed_dim)
        self.blocks = nn.ModuleList(TransformerBlock(stage) for _ in range(stage.depth))

    def forward(self, x: Tensor, skip: Tensor, dim_tag: DimTag) -> Tensor:
        up = self.embed(x, dim_tag)
        if up.shape != skip.shape:
            raise ShapeError(f"skip connection shape {tuple(skip.shape)} does not match "
                             f"upsampled features {tuple(up.shape)}")
        fmap = up + skip
        seq = TokenSequence(self.embed_norm(fmap.flatten(2).transpose(1, 2)), dim_tag, tuple(fmap.shape[2:]))
        for blk in self.blocks:
            seq = blk(seq)
        return seq.to_map()


class MiT(nn.Module):
    """Four-stage SRA encoder, three-stage decoder with additive skips."""

    def __init__(self, cfg: MiTConfig | None = None):
        super().__init__()
        cfg = MiTConfig() if cfg is None else cfg
        cfg.validate()
        self.cfg = cfg
        enc = cfg.stages_encoder
        chans = [cfg.in_chans] + [s.embed_dim for s in enc]
        self.encoder = nn.ModuleList(
            EncoderStage(chans[i], enc[i],
                         tuple(g // 2 ** (i + 1) for g in cfg.pos_grid_2d),
                         tuple(g // 2 ** (i + 1) for g in cfg.pos_grid_3d))
            for i in range(4)
        )
        self.norm = nn.LayerNorm(enc[-1].embed_dim)
        dec = cfg.stages_decoder
        dec_in = [enc[3].embed_dim, dec[0].embed_dim, dec[1].embed_dim]
        self.decoder = nn.ModuleList(DecoderStage(dec_in[j], dec[j]) for j in range(3))
        self.apply(_init_weights)

    @property
    def embed_dim(self) -> int:
        return self.cfg.embed_dims[-1]

    def check_input(self, x: Tensor, dim_tag: DimTag | None = None) -> DimTag:
        """Validate extents against the 2^4 stride product and every stage's SRA ratio."""
        dim_tag = DimTag.of(x) if dim_tag is None else DimTag(dim_tag)
        _check_rank(x, dim_tag)
        if x.shape[1] != self.cfg.in_chans:
            raise ShapeError(f"expected {self.cfg.in_chans} input channels, got {x.shape[1]}")
        for axis, extent in zip(AXIS_NAMES[dim_tag.ndim], x.shape[2:]):
            if extent % 16:
                raise ShapeError(f"{axis} extent {extent} is not divisible by 16 (four stride-2 stages)")
            for i, st in enumerate(self.cfg.stages_encoder):
                r = st.reduction(dim_tag)
                if (extent // 2 ** (i + 1)) % r:
                    raise ShapeError(f"{axis} extent {extent} gives {extent // 2 ** (i + 1)} at stage {i + 1}, "
                                     f"not divisible by SRA ratio {r}")
        return dim_tag

    def encode(self, x: Tensor, dim_tag: DimTag | None = None) -> tuple[list[StageOutput], Tensor]:
        dim_tag = self.check_input(x, dim_tag)
        outputs = []
        for i, stage in enumerate(self.encoder):
            seq = stage(x, dim_tag)
            if i == 3:
                seq = seq.with_tokens(self.norm(seq.tokens))
            ssl, _ = seq.split()
            x = seq.to_map()
            outputs.append(StageOutput(x, ssl[:, 0]))
        return outputs, outputs[-1].ssl_token

    def decode(self, stage_outputs: list[StageOutput]) -> Tensor:
        if len(stage_outputs) != 4:
            raise ShapeError(f"decode needs four encoder stage outputs, got {len(stage_outputs)}")
        x = stage_outputs[3].feature_map
        dim_tag = DimTag.of(x)
        for j, stage in enumerate(self.decoder):
            x = stage(x, stage_outputs[2 - j].feature_map, dim_tag)
        return x

    def forward(self, x: Tensor, dim_tag: DimTag | None = None) -> Tensor:
        """SSL token of the last encoder stage."""
        return self.encode(x, dim_tag)[1]


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


def is_dimension_specific(name: str) -> str | None:
    """'2d' / '3d' for parameters owned by one dimensionality, else None."""
    for part in name.split("."):
        if part.endswith("_2d"):
            return "2d"
        if part.endswith("_3d"):
            return "3d"
    return None
