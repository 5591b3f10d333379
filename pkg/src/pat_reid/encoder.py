"""Token-masked transformer encoder with region-scoped part tokens.

Sequence layout is ``[class, part_1..M, image_1..N]`` plus a positional
table. Per block the class and image tokens attend over themselves
(global path) while each part token attends only over itself and the
image tokens of its region; image rows are updated exclusively by the
global path, so overlapping regions never write conflicting updates.
One Q/K/V projection per block serves both paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .config import ModelConfig
from .errors import ConfigError, NumericalError, ShapeError, StateError


@dataclass(frozen=True)
class PartRegionSpec:
    """Per part token, the ordered image-token indices it may attend to.

    Regions must be non-empty, in range, and together cover every row of
    the patch grid.
    """

    regions: tuple[tuple[int, ...], ...]
    grid_h: int
    grid_w: int

    def __post_init__(self):
        n = self.grid_h * self.grid_w
        covered_rows: set[int] = set()
        for i, region in enumerate(self.regions):
            if len(region) == 0:
                raise ConfigError(f"region {i} is empty")
            if min(region) < 0 or max(region) >= n:
                raise ConfigError(f"region {i} has token indices outside [0, {n})")
            covered_rows.update(t // self.grid_w for t in region)
        if covered_rows != set(range(self.grid_h)):
            missing = sorted(set(range(self.grid_h)) - covered_rows)
            raise ConfigError(f"regions leave grid rows {missing} uncovered")

    @property
    def num_parts(self) -> int:
        return len(self.regions)


def default_part_regions(grid_h: int, grid_w: int, num_parts: int) -> PartRegionSpec:
    """Square windows of side ``grid_w``, evenly spaced down the grid.

    Window top rows are ``floor(i * (grid_h - grid_w) / (num_parts - 1))``;
    a single part requires a square grid so that one window covers it.
    """
    if grid_h < grid_w:
        raise ConfigError(f"no square window of side {grid_w} fits a {grid_h}-row grid")
    if num_parts < 1:
        raise ConfigError("num_parts must be >= 1")
    if num_parts == 1:
        tops = [0]
    else:
        tops = [(i * (grid_h - grid_w)) // (num_parts - 1) for i in range(num_parts)]
    regions = []
    for top in tops:
        rows = range(top, top + grid_w)
        regions.append(tuple(r * grid_w + c for r in rows for c in range(grid_w)))
    return PartRegionSpec(regions=tuple(regions), grid_h=grid_h, grid_w=grid_w)


@dataclass
class BlockParams:
    ln1_g: Tensor
    ln1_b: Tensor
    wq: Tensor
    bq: Tensor
    wk: Tensor
    bk: Tensor
    wv: Tensor
    bv: Tensor
    wo: Tensor
    bo: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor


@dataclass
class EncoderParams:
    patch_w: Tensor
    patch_b: Tensor
    cls_token: Tensor
    part_tokens: Tensor
    pos_embed: Tensor
    blocks: list[BlockParams]
    final_ln_g: Tensor
    final_ln_b: Tensor
    head_w: Tensor
    head_b: Tensor

    def named(self) -> dict[str, Tensor]:
        out = {
            "patch_w": self.patch_w,
            "patch_b": self.patch_b,
            "cls_token": self.cls_token,
            "part_tokens": self.part_tokens,
            "pos_embed": self.pos_embed,
        }
        for i, blk in enumerate(self.blocks):
            for attr in ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                         "wo", "bo", "ln2_g", "ln2_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2"):
                out[f"block{i}.{attr}"] = getattr(blk, attr)
        out["final_ln_g"] = self.final_ln_g
        out["final_ln_b"] = self.final_ln_b
        out["head_w"] = self.head_w
        out["head_b"] = self.head_b
        return out


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    x = rng.standard_normal(shape)
    for _ in range(8):
        bad = np.abs(x) > 2.0
        if not bad.any():
            break
        x[bad] = rng.standard_normal(int(bad.sum()))
    return (std * np.clip(x, -2.0, 2.0)).astype(dtype)


def init_encoder_params(config: ModelConfig, seed: int, dtype=np.float32) -> EncoderParams:
    """Fresh parameters: truncated normal (std 0.02) weights, zero biases,
    unit layer-norm scales."""
    rng = np.random.default_rng([seed, 0x5E_ED])
    d = config.embed_dim
    patch_in = config.channels * config.patch_size * config.patch_size

    def w(shape):
        return Tensor(_trunc_normal(rng, shape, 0.02, dtype), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype), requires_grad=True)

    blocks = []
    patch_w = w((patch_in, d))
    patch_b = zeros((d,))
    cls_token = w((1, d))
    part_tokens = w((config.num_parts, d))
    pos_embed = w((config.seq_len, d))
    hidden = d * config.mlp_ratio
    for _ in range(config.blocks):
        blocks.append(BlockParams(
            ln1_g=ones((d,)), ln1_b=zeros((d,)),
            wq=w((d, d)), bq=zeros((d,)),
            wk=w((d, d)), bk=zeros((d,)),
            wv=w((d, d)), bv=zeros((d,)),
            wo=w((d, d)), bo=zeros((d,)),
            ln2_g=ones((d,)), ln2_b=zeros((d,)),
            ffn_w1=w((d, hidden)), ffn_b1=zeros((hidden,)),
            ffn_w2=w((hidden, d)), ffn_b2=zeros((d,)),
        ))
    return EncoderParams(
        patch_w=patch_w, patch_b=patch_b,
        cls_token=cls_token, part_tokens=part_tokens, pos_embed=pos_embed,
        blocks=blocks,
        final_ln_g=ones((d,)), final_ln_b=zeros((d,)),
        head_w=w((d, config.num_classes)), head_b=zeros((config.num_classes,)),
    )


_BLOCK_ATTRS = ("ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv",
                "wo", "bo", "ln2_g", "ln2_b", "ffn_w1", "ffn_b1", "ffn_w2", "ffn_b2")


def params_from_named(config: ModelConfig, named: dict[str, Tensor]) -> EncoderParams:
    """Assemble EncoderParams from tensors keyed like ``EncoderParams.named()``."""

    def get(name: str) -> Tensor:
        if name not in named:
            raise ConfigError(f"missing parameter {name!r}")
        return named[name]

    blocks = [
        BlockParams(**{attr: get(f"block{i}.{attr}") for attr in _BLOCK_ATTRS})
        for i in range(config.blocks)
    ]
    return EncoderParams(
        patch_w=get("patch_w"), patch_b=get("patch_b"),
        cls_token=get("cls_token"), part_tokens=get("part_tokens"),
        pos_embed=get("pos_embed"), blocks=blocks,
        final_ln_g=get("final_ln_g"), final_ln_b=get("final_ln_b"),
        head_w=get("head_w"), head_b=get("head_b"),
    )


def params_from_arrays(config: ModelConfig, arrays: dict[str, np.ndarray]) -> EncoderParams:
    """Rebuild trainable parameters from a name -> array mapping."""
    template = init_encoder_params(config, seed=0)
    named = template.named()
    missing = sorted(set(named) - set(arrays))
    if missing:
        raise ConfigError(f"checkpoint is missing parameters: {missing[:4]}...")
    for name, tensor in named.items():
        arr = np.asarray(arrays[name], dtype=tensor.dtype)
        if arr.shape != tensor.shape:
            raise ConfigError(
                f"parameter {name} has shape {list(arr.shape)}, expected {list(tensor.shape)}"
            )
        tensor.data = arr
    return template


@dataclass
class BlockAttention:
    """Retained attention probabilities of one block (detached arrays)."""

    global_probs: np.ndarray          # [B, heads, 1+N, 1+N]
    part_probs: list[np.ndarray]      # per part: [B, heads, 1, 1+|R_i|]


@dataclass
class EncoderOutput:
    global_feat: Tensor               # [B, D]
    local_feats: list[Tensor]         # per part: [B, D]
    logits: Tensor                    # [B, num_classes]
    attention: list[BlockAttention] | None = None


def patch_embed(images, params: EncoderParams, config: ModelConfig) -> Tensor:
    """Project non-overlapping patches to embeddings, row-major over the grid.

    Accepts ``[C, H, W]`` or ``[B, C, H, W]``; returns ``[N, D]`` or ``[B, N, D]``.
    """
    x = images if isinstance(images, Tensor) else Tensor(images)
    squeeze = x.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    b, c, h, w = x.shape
    if (c, h, w) != (config.channels, config.image_h, config.image_w):
        raise ShapeError(
            f"image dims {[c, h, w]} do not match configured "
            f"{[config.channels, config.image_h, config.image_w]}"
        )
    p = config.patch_size
    gh, gw = config.grid_h, config.grid_w
    x = ad.reshape(x, (b, c, gh, p, gw, p))
    x = ad.transpose(x, (0, 2, 4, 1, 3, 5))          # [B, gh, gw, C, p, p]
    x = ad.reshape(x, (b, gh * gw, c * p * p))
    out = ad.add(ad.matmul(x, params.patch_w), params.patch_b)
    return ad.reshape(out, (gh * gw, config.embed_dim)) if squeeze else out


def _ln_affine(x: Tensor, g: Tensor, b: Tensor) -> Tensor:
    return ad.add(ad.mul(ad.layer_norm(x), g), b)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    b, s, d = x.shape
    return ad.transpose(ad.reshape(x, (b, s, heads, d // heads)), (0, 2, 1, 3))


def _merge_heads(x: Tensor) -> Tensor:
    b, h, s, dh = x.shape
    return ad.reshape(ad.transpose(x, (0, 2, 1, 3)), (b, s, h * dh))


def _qkv_heads(z_norm: Tensor, blk: BlockParams, heads: int) -> tuple[Tensor, Tensor, Tensor]:
    q = ad.add(ad.matmul(z_norm, blk.wq), blk.bq)
    k = ad.add(ad.matmul(z_norm, blk.wk), blk.bk)
    v = ad.add(ad.matmul(z_norm, blk.wv), blk.bv)
    return _split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads)


def _attend(q: Tensor, k: Tensor, v: Tensor) -> tuple[Tensor, np.ndarray]:
    dh = q.shape[-1]
    scores = ad.scale(ad.matmul(q, ad.transpose(k)), 1.0 / math.sqrt(dh))
    probs = ad.softmax(scores, axis=-1)
    return ad.matmul(probs, v), probs.data


def global_attention(z_norm: Tensor, blk: BlockParams, heads: int, num_parts: int,
                     qkv: tuple[Tensor, Tensor, Tensor] | None = None,
                     ) -> tuple[Tensor, np.ndarray]:
    """Self-attention over the class + image subsequence only.

    Part-token rows neither attend nor are attended here. Returns the
    updated ``[B, 1+N, D]`` rows (pre output-projection) and the
    attention probabilities ``[B, heads, 1+N, 1+N]``.
    """
    qh, kh, vh = qkv if qkv is not None else _qkv_heads(z_norm, blk, heads)
    seq = z_norm.shape[-2]
    idx = [0] + list(range(1 + num_parts, seq))
    out, probs = _attend(
        ad.gather_rows(qh, idx), ad.gather_rows(kh, idx), ad.gather_rows(vh, idx)
    )
    return _merge_heads(out), probs


def part_attention(z_norm: Tensor, blk: BlockParams, heads: int, regions: PartRegionSpec,
                   qkv: tuple[Tensor, Tensor, Tensor] | None = None,
                   ) -> tuple[Tensor, list[np.ndarray]]:
    """Per part, self-attention over [part_i] + its region's image tokens.

    Only the part-token row of each output is produced; attention weight
    on any token outside the part's set is zero by construction (those
    tokens are never gathered). Returns ``[B, M, D]`` plus per-part
    probabilities ``[B, heads, 1, 1+|R_i|]``.
    """
    qh, kh, vh = qkv if qkv is not None else _qkv_heads(z_norm, blk, heads)
    num_parts = regions.num_parts
    rows = []
    all_probs = []
    for i, region in enumerate(regions.regions):
        kv_idx = [1 + i] + [1 + num_parts + t for t in region]
        out, probs = _attend(
            ad.gather_rows(qh, [1 + i]),
            ad.gather_rows(kh, kv_idx),
            ad.gather_rows(vh, kv_idx),
        )
        rows.append(_merge_heads(out))
        all_probs.append(probs)
    return ad.concat(rows, axis=1), all_probs


def assemble_tokens(images, params: EncoderParams, config: ModelConfig) -> Tensor:
    """Embed patches, prepend class and part tokens, add positions."""
    patches = patch_embed(images, params, config)
    if patches.ndim == 2:
        patches = ad.reshape(patches, (1,) + patches.shape)
    b = patches.shape[0]
    d = config.embed_dim
    cls_rows = ad.expand(ad.reshape(params.cls_token, (1, 1, d)), (b, 1, d))
    part_rows = ad.expand(
        ad.reshape(params.part_tokens, (1, config.num_parts, d)), (b, config.num_parts, d)
    )
    tokens = ad.concat([cls_rows, part_rows, patches], axis=1)
    return ad.add(tokens, params.pos_embed)


def encoder_forward(images, params: EncoderParams, regions: PartRegionSpec,
                    config: ModelConfig, retain_attention: bool = False) -> EncoderOutput:
    """Full encoder pass for ``[B, C, H, W]`` (or a single ``[C, H, W]``) input.

    Per block: layer norm, then global and part attention both reading
    the same normalized pre-block sequence, shared output projection,
    residual, layer norm, FFN, residual. A final layer norm is applied
    when the encoder has at least one block.
    """
    if regions.num_parts != config.num_parts:
        raise ConfigError(
            f"regions define {regions.num_parts} parts, config has {config.num_parts}"
        )
    z = assemble_tokens(images, params, config)
    b = z.shape[0]
    n = config.num_patches
    m = config.num_parts
    retained: list[BlockAttention] | None = [] if retain_attention else None
    for bi, blk in enumerate(params.blocks):
        zn = _ln_affine(z, blk.ln1_g, blk.ln1_b)
        qkv = _qkv_heads(zn, blk, config.heads)
        g_rows, g_probs = global_attention(zn, blk, config.heads, m, qkv=qkv)
        p_rows, p_probs = part_attention(zn, blk, config.heads, regions, qkv=qkv)
        att = ad.concat(
            [ad.slice_axis(g_rows, 1, 0, 1), p_rows, ad.slice_axis(g_rows, 1, 1, 1 + n)],
            axis=1,
        )
        z = ad.add(z, ad.add(ad.matmul(att, blk.wo), blk.bo))
        zn2 = _ln_affine(z, blk.ln2_g, blk.ln2_b)
        hidden = ad.gelu(ad.add(ad.matmul(zn2, blk.ffn_w1), blk.ffn_b1))
        z = ad.add(z, ad.add(ad.matmul(hidden, blk.ffn_w2), blk.ffn_b2))
        if not ad.is_finite(z):
            raise NumericalError(f"non-finite activations after block {bi}")
        if retained is not None:
            retained.append(BlockAttention(global_probs=g_probs, part_probs=p_probs))
    if params.blocks:
        z = _ln_affine(z, params.final_ln_g, params.final_ln_b)
    d = config.embed_dim
    global_feat = ad.reshape(ad.slice_axis(z, 1, 0, 1), (b, d))
    local_feats = [
        ad.reshape(ad.slice_axis(z, 1, 1 + i, 2 + i), (b, d)) for i in range(m)
    ]
    logits = ad.add(ad.matmul(global_feat, params.head_w), params.head_b)
    return EncoderOutput(global_feat=global_feat, local_feats=local_feats,
                         logits=logits, attention=retained)


def fused_attention_map(output: EncoderOutput, token: str, config: ModelConfig,
                        regions: PartRegionSpec, sample: int = 0) -> np.ndarray:
    """Average a token's attention over image-token columns across the
    first ceil(L/2) blocks (heads averaged), on the patch grid in [0, 1].

    ``token`` is ``"cls"`` or ``"p<i>"`` with i in 1..num_parts. Requires
    the forward pass to have retained attention.
    """
    if output.attention is None:
        raise StateError("attention was not retained during the forward pass")
    if not output.attention:
        raise StateError("encoder has no blocks, no attention to fuse")
    n = config.num_patches
    use = output.attention[: math.ceil(len(output.attention) / 2)]
    acc = np.zeros(n, dtype=np.float64)
    for block in use:
        if token == "cls":
            acc += block.global_probs[sample, :, 0, 1:].mean(axis=0)
        elif token.startswith("p"):
            idx = int(token[1:]) - 1
            if not (0 <= idx < regions.num_parts):
                raise ConfigError(f"unknown token {token!r}")
            weights = block.part_probs[idx][sample, :, 0, 1:].mean(axis=0)
            scattered = np.zeros(n, dtype=np.float64)
            scattered[np.asarray(regions.regions[idx])] = weights
            acc += scattered
        else:
            raise ConfigError(f"unknown token {token!r}")
    acc /= len(use)
    return np.clip(acc.reshape(config.grid_h, config.grid_w), 0.0, 1.0)


def trainable_parameters(params: EncoderParams) -> dict[str, Tensor]:
    return params.named()


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None
