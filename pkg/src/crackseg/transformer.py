"""Transformer-path building blocks.

Overlapping patch embedding (strided conv tokenizer), efficient self-attention
with key/value sequence reduction, and the Mix-FFN block whose inner depthwise
3x3 convolution stands in for positional encoding. Stages compose one patch
embedding with a stack of pre-norm attention + Mix-FFN blocks.
"""

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


def conv_out_size(size: int, kernel: int, stride: int, padding: int) -> int:
    """Output side length of a strided convolution: floor((L + 2P - K) / S) + 1."""
    return (size + 2 * padding - kernel) // stride + 1


@dataclass(frozen=True)
class PatchEmbedConfig:
    """Sliding-window tokenizer parameters. kernel_size >= stride keeps patches overlapping."""

    kernel_size: int = 7
    stride: int = 4
    padding: int = 3
    in_channels: int = 3
    embed_dim: int = 64

    def __post_init__(self):
        if self.kernel_size < 1 or self.stride < 1:
            raise ValueError("kernel_size and stride must be positive")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        if self.kernel_size < self.stride:
            raise ValueError(
                f"kernel_size {self.kernel_size} < stride {self.stride}: patches would skip pixels"
            )
        if self.in_channels < 1 or self.embed_dim < 1:
            raise ValueError("in_channels and embed_dim must be positive")

    def out_size(self, size: int) -> int:
        return conv_out_size(size, self.kernel_size, self.stride, self.padding)


@dataclass(frozen=True)
class AttentionConfig:
    """Multi-head attention with the key/value sequence shortened by `reduction`.

    When `pad_tokens` is set, sequences whose length is not divisible by the
    reduction ratio are zero-padded at the end (bottom of the row-major token
    grid) before the reduction reshape; queries keep full length, so the
    output length is unaffected.
    """

    embed_dim: int = 64
    num_heads: int = 1
    reduction: int = 1
    pad_tokens: bool = True

    def __post_init__(self):
        if self.embed_dim < 1 or self.num_heads < 1 or self.reduction < 1:
            raise ValueError("embed_dim, num_heads and reduction must be positive")
        if self.embed_dim % self.num_heads:
            raise ValueError(
                f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads


@dataclass(frozen=True)
class StageConfig:
    """One hierarchical stage: a patch embedding plus `depth` attention/Mix-FFN blocks."""

    patch_embed: PatchEmbedConfig
    attention: AttentionConfig
    depth: int = 1
    mlp_expansion: int = 4

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.mlp_expansion < 1:
            raise ValueError("mlp_expansion must be >= 1")
        if self.patch_embed.embed_dim != self.attention.embed_dim:
            raise ValueError("patch_embed.embed_dim and attention.embed_dim disagree")


def _init_weights(m: nn.Module):
    if isinstance(m, (nn.Linear, nn.Conv2d)):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class OverlapPatchEmbed(nn.Module):
    """Tokenize a feature map with an overlapping strided convolution.

    Returns layer-normalized tokens (B, N, C) together with the token grid
    size, N = out_h * out_w.
    """

    def __init__(self, cfg: PatchEmbedConfig):
        super().__init__()
        self.cfg = cfg
        self.proj = nn.Conv2d(
            cfg.in_channels,
            cfg.embed_dim,
            kernel_size=cfg.kernel_size,
            stride=cfg.stride,
            padding=cfg.padding,
        )
        self.norm = nn.LayerNorm(cfg.embed_dim)
        self.apply(_init_weights)

    def forward(self, x: torch.Tensor):
        if x.dim() != 4:
            raise ValueError(f"expected a 4D tensor, got {tuple(x.shape)}")
        _, c, h, w = x.shape
        if c != self.cfg.in_channels:
            raise ValueError(f"expected {self.cfg.in_channels} input channels, got {c}")
        k, p = self.cfg.kernel_size, self.cfg.padding
        if h + 2 * p < k or w + 2 * p < k:
            raise ValueError(
                f"input {h}x{w} with padding {p} is smaller than the {k}x{k} kernel"
            )
        x = self.proj(x)
        out_h, out_w = x.shape[-2:]
        tokens = self.norm(x.flatten(2).transpose(1, 2))  # B x N x C
        return tokens, out_h, out_w


class EfficientSelfAttention(nn.Module):
    """Scaled dot-product attention whose K/V sequence is shortened R-fold.

    K and V are each reshaped from (N, C) to (N/R, C*R) and projected back to
    C channels before the usual per-head Softmax(Q K^T / sqrt(d)) V.
    """

    def __init__(self, cfg: AttentionConfig):
        super().__init__()
        self.cfg = cfg
        dim = cfg.embed_dim
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.reduce_k = nn.Linear(dim * cfg.reduction, dim)
        self.reduce_v = nn.Linear(dim * cfg.reduction, dim)
        self.proj = nn.Linear(dim, dim)
        self.apply(_init_weights)

    def _reduce(self, x: torch.Tensor, linear: nn.Linear) -> torch.Tensor:
        b, n, c = x.shape
        r = self.cfg.reduction
        if n % r:
            if not self.cfg.pad_tokens:
                raise ValueError(f"sequence length {n} not divisible by reduction {r}")
            x = F.pad(x, (0, 0, 0, r - n % r))
        return linear(x.reshape(b, x.shape[1] // r, c * r))

    def forward(self, tokens: torch.Tensor, need_weights: bool = False):
        b, n, c = tokens.shape
        if c != self.cfg.embed_dim:
            raise ValueError(f"expected embed_dim {self.cfg.embed_dim}, got {c}")
        heads, d = self.cfg.num_heads, self.cfg.head_dim

        q = self.q(tokens).reshape(b, n, heads, d).transpose(1, 2)  # B x h x N x d
        k = self._reduce(self.k(tokens), self.reduce_k)
        v = self._reduce(self.v(tokens), self.reduce_v)
        m = k.shape[1]
        k = k.reshape(b, m, heads, d).transpose(1, 2)  # B x h x M x d
        v = v.reshape(b, m, heads, d).transpose(1, 2)

        attn = torch.softmax(q @ k.transpose(-2, -1) / math.sqrt(d), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj(out)
        if need_weights:
            return out, attn
        return out


class MixFFN(nn.Module):
    """Feed-forward block with a depthwise 3x3 convolution between the two MLPs.

    forward() adds the unmodified input back: out = fc2(GELU(conv(fc1(x)))) + x.
    inner() exposes the chain without the residual for pre-norm composition.
    """

    def __init__(self, dim: int, expansion: int = 4):
        super().__init__()
        hidden = dim * expansion
        self.fc1 = nn.Linear(dim, hidden)
        self.conv = nn.Conv2d(hidden, hidden, kernel_size=3, padding=1, groups=hidden)
        self.act = nn.GELU()
        self.fc2 = nn.Linear(hidden, dim)
        self.apply(_init_weights)

    def inner(self, tokens: torch.Tensor, hw) -> torch.Tensor:
        h, w = hw
        b, n, _ = tokens.shape
        if n != h * w:
            raise ValueError(f"token count {n} does not match grid {h}x{w}")
        x = self.fc1(tokens)
        x = x.transpose(1, 2).reshape(b, -1, h, w)
        x = self.conv(x)
        x = x.flatten(2).transpose(1, 2)
        return self.fc2(self.act(x))

    def forward(self, tokens: torch.Tensor, hw) -> torch.Tensor:
        return self.inner(tokens, hw) + tokens


class TransformerBlock(nn.Module):
    """Pre-norm attention + Mix-FFN. Residuals add the un-normalized input."""

    def __init__(self, attention: AttentionConfig, mlp_expansion: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(attention.embed_dim)
        self.attn = EfficientSelfAttention(attention)
        self.norm2 = nn.LayerNorm(attention.embed_dim)
        self.ffn = MixFFN(attention.embed_dim, mlp_expansion)

    def forward(self, tokens: torch.Tensor, hw) -> torch.Tensor:
        tokens = tokens + self.attn(self.norm1(tokens))
        tokens = tokens + self.ffn.inner(self.norm2(tokens), hw)
        return tokens


class TransformerStage(nn.Module):
    """Patch-embed once, run `depth` blocks, and fold tokens back to a map."""

    def __init__(self, cfg: StageConfig):
        super().__init__()
        self.cfg = cfg
        self.patch_embed = OverlapPatchEmbed(cfg.patch_embed)
        self.blocks = nn.ModuleList(
            TransformerBlock(cfg.attention, cfg.mlp_expansion) for _ in range(cfg.depth)
        )
        self.norm = nn.LayerNorm(cfg.patch_embed.embed_dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        tokens, h, w = self.patch_embed(x)
        for block in self.blocks:
            tokens = block(tokens, (h, w))
        tokens = self.norm(tokens)
        return tokens.transpose(1, 2).reshape(x.shape[0], -1, h, w)
