"""Cross-layer feature self-attention pipeline.

Three stages over a multi-scale feature pyramid:

1. local extraction — per scale, a 3×3 same-padding conv keeping the
   native channel count, then a 1×1 conv unifying channels;
2. global modeling — flatten every map to tokens, concatenate across
   scales, split the sequence into ``part`` interleaved blocks by
   stride sampling, run a transformer encoder independently per block,
   and invert the interleaving;
3. fusion restoration — channel-concat the sequence before/after
   global modeling, project back down with a pointwise layer, then
   split, reshape, and project each span back to its scale's original
   channel count.

Everything is built from the autograd ops in :mod:`cfsam.tensor`, so a
forward pass is differentiable end to end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from cfsam import tensor as T
from cfsam.tensor import Tensor

LN_EPS = 1e-5

# the six prediction map shapes of the 300×300 single-shot detector
SSD300_SHAPES = [
    (38, 38, 512),
    (19, 19, 1024),
    (10, 10, 512),
    (5, 5, 256),
    (3, 3, 256),
    (1, 1, 256),
]


class ConfigError(ValueError):
    pass


@dataclass
class CfsamConfig:
    channels: int = 256          # unified channel count after local extraction
    part: int = 2                # number of interleaved attention blocks
    num_heads: int = 4
    transformer_layers: int = 1
    ffn_ratio: float = 2.0
    use_positional_embedding: bool = False
    residual_input: bool = False  # add the raw input map to each output map
    seed: int = 0
    precision: str = "f64"

    def __post_init__(self):
        if self.channels < 1 or self.part < 1 or self.num_heads < 1:
            raise ConfigError("channels, part, num_heads must be positive")
        if self.transformer_layers < 0:
            raise ConfigError("transformer_layers must be >= 0")
        if self.channels % self.num_heads != 0:
            raise ConfigError(
                f"channels {self.channels} not divisible by num_heads {self.num_heads}"
            )
        if self.precision not in T.DTYPES:
            raise ConfigError(f"precision must be one of {sorted(T.DTYPES)}")

    @property
    def dtype(self):
        return T.DTYPES[self.precision]

    @property
    def ffn_dim(self) -> int:
        return max(1, int(round(self.ffn_ratio * self.channels)))


@dataclass
class FeaturePyramid:
    maps: list[Tensor]

    def __post_init__(self):
        if not self.maps:
            raise ConfigError("pyramid needs at least one map")
        areas = []
        for m in self.maps:
            if m.data.ndim != 3:
                raise ConfigError("pyramid maps must be H×W×C")
            if min(m.shape) < 1:
                raise ConfigError("pyramid dims must be positive")
            areas.append(m.shape[0] * m.shape[1])
        if any(a < b for a, b in zip(areas, areas[1:])):
            raise ConfigError("pyramid maps must be ordered largest area first")

    @property
    def shapes(self) -> list[tuple[int, int, int]]:
        return [m.shape for m in self.maps]

    @property
    def channel_list(self) -> list[int]:
        return [m.shape[2] for m in self.maps]

    @property
    def total_tokens(self) -> int:
        return sum(h * w for h, w, _ in self.shapes)


@dataclass
class PartitionedSequence:
    blocks: Tensor               # part × (padded_length/part) × C
    original_length: int
    padded_length: int
    part: int

    def __post_init__(self):
        if self.padded_length % self.part != 0:
            raise ConfigError("padded_length must be divisible by part")
        expect = (self.part, self.padded_length // self.part)
        if self.blocks.shape[:2] != expect:
            raise ConfigError(
                f"blocks shaped {self.blocks.shape}, metadata implies {expect}"
            )

    @property
    def block_length(self) -> int:
        return self.padded_length // self.part


@dataclass
class LocalWeights:
    conv3_w: Tensor   # 3×3×Ci×Ci
    conv3_b: Tensor
    conv1_w: Tensor   # 1×1×Ci×C
    conv1_b: Tensor


@dataclass
class TransformerLayerWeights:
    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    ln1_g: Tensor
    ln1_b: Tensor
    ln2_g: Tensor
    ln2_b: Tensor
    ffn1_w: Tensor
    ffn1_b: Tensor
    ffn2_w: Tensor
    ffn2_b: Tensor


@dataclass
class CfsamWeights:
    local: list[LocalWeights]
    layers: list[TransformerLayerWeights]
    fuse_w: Tensor                    # 2C×C
    fuse_b: Tensor
    restore: list[tuple[Tensor, Tensor]]  # per scale: C×Ci matrix + bias

    def named_tensors(self):
        for i, lw in enumerate(self.local):
            yield f"local.{i}.conv3_w", lw.conv3_w
            yield f"local.{i}.conv3_b", lw.conv3_b
            yield f"local.{i}.conv1_w", lw.conv1_w
            yield f"local.{i}.conv1_b", lw.conv1_b
        for j, tw in enumerate(self.layers):
            for name in (
                "wq", "wk", "wv", "wo",
                "ln1_g", "ln1_b", "ln2_g", "ln2_b",
                "ffn1_w", "ffn1_b", "ffn2_w", "ffn2_b",
            ):
                yield f"transformer.{j}.{name}", getattr(tw, name)
        yield "fuse.w", self.fuse_w
        yield "fuse.b", self.fuse_b
        for i, (w, b) in enumerate(self.restore):
            yield f"restore.{i}.w", w
            yield f"restore.{i}.b", b

    def num_scalars(self) -> int:
        return sum(t.size for _, t in self.named_tensors())

    def set_requires_grad(self, flag: bool = True) -> None:
        for _, t in self.named_tensors():
            t.requires_grad = flag


def init_weights(config: CfsamConfig, channel_list, seed=None) -> CfsamWeights:
    """Deterministic fan-in-scaled uniform initialization."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    dt = config.dtype
    C = config.channels
    F = config.ffn_dim

    def uniform(shape, fan_in):
        bound = 1.0 / math.sqrt(fan_in)
        return Tensor(rng.uniform(-bound, bound, size=shape).astype(dt), requires_grad=True)

    def zeros(shape):
        return Tensor(np.zeros(shape, dtype=dt), requires_grad=True)

    def ones(shape):
        return Tensor(np.ones(shape, dtype=dt), requires_grad=True)

    local = []
    for ci in channel_list:
        local.append(
            LocalWeights(
                conv3_w=uniform((3, 3, ci, ci), 9 * ci),
                conv3_b=zeros((ci,)),
                conv1_w=uniform((1, 1, ci, C), ci),
                conv1_b=zeros((C,)),
            )
        )
    layers = []
    for _ in range(config.transformer_layers):
        layers.append(
            TransformerLayerWeights(
                wq=uniform((C, C), C),
                wk=uniform((C, C), C),
                wv=uniform((C, C), C),
                wo=uniform((C, C), C),
                ln1_g=ones((C,)),
                ln1_b=zeros((C,)),
                ln2_g=ones((C,)),
                ln2_b=zeros((C,)),
                ffn1_w=uniform((C, F), C),
                ffn1_b=zeros((F,)),
                ffn2_w=uniform((F, C), F),
                ffn2_b=zeros((C,)),
            )
        )
    fuse_w = uniform((2 * C, C), 2 * C)
    fuse_b = zeros((C,))
    restore = [(uniform((C, ci), C), zeros((ci,))) for ci in channel_list]
    return CfsamWeights(local=local, layers=layers, fuse_w=fuse_w, fuse_b=fuse_b, restore=restore)


# -- stage 1: local extraction ----------------------------------------------


def local_extract(pyramid: FeaturePyramid, weights: CfsamWeights, config: CfsamConfig):
    """3×3 same-padding conv then 1×1 channel unification, per scale."""
    if len(weights.local) != len(pyramid.maps):
        raise ConfigError("weight bundle does not match pyramid scale count")
    outs = []
    for m, lw in zip(pyramid.maps, weights.local):
        if lw.conv3_w.shape[2] != m.shape[2]:
            raise T.TensorError(
                f"local weights expect {lw.conv3_w.shape[2]} channels, map has {m.shape[2]}"
            )
        h = T.conv2d(m, lw.conv3_w, lw.conv3_b, padding=1, stride=1)
        h = T.conv2d(h, lw.conv1_w, lw.conv1_b, padding=0, stride=1)
        outs.append(h)
    return outs


# -- stage 2: global modeling -------------------------------------------------


def flatten_concat(locals_: list[Tensor]) -> Tensor:
    """Flatten each H×W×C map to C×(H·W) tokens and concat along length.

    Tokens of map i occupy a contiguous span in scale order; within a
    map the token order is row-major (H, then W).
    """
    C = locals_[0].shape[2]
    seqs = []
    for m in locals_:
        if m.shape[2] != C:
            raise T.TensorError("flatten_concat: channel mismatch across maps")
        h, w, _ = m.shape
        seqs.append(T.transpose2d(T.reshape(m, (h * w, C))))
    return seqs[0] if len(seqs) == 1 else T.concat(seqs, axis=1)


def partition_indices(padded_length: int, part: int) -> np.ndarray:
    """Padded token index for each (block, position), flattened per block."""
    return np.concatenate(
        [np.arange(p, padded_length, part) for p in range(part)]
    )


def partition(L: Tensor, part: int) -> PartitionedSequence:
    """Interleaved stride sampling of a C×Length sequence into blocks.

    Block p receives padded indices p, p+part, p+2·part, … so relative
    spatial order survives inside every block. Non-divisible lengths are
    first resampled (linear, align-corners) up to the next multiple.
    """
    if part < 1:
        raise ConfigError("part must be >= 1")
    C, length = L.shape
    padded = length if length % part == 0 else ((length // part) + 1) * part
    Lp = T.interp_linear_1d(L, padded) if padded != length else L
    idx = partition_indices(padded, part)
    gathered = T.take(Lp, axis=1, indices=idx)          # C × padded, block-major
    blocks = T.reshape(T.transpose2d(gathered), (part, padded // part, C))
    return PartitionedSequence(
        blocks=blocks, original_length=length, padded_length=padded, part=part
    )


def _sincos_embedding(n: int, c: int, dtype) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(c)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / c)
    emb = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    return emb.astype(dtype)


def transformer_unit(block: Tensor, weights: CfsamWeights, config: CfsamConfig) -> Tensor:
    """Pre-norm encoder stack over the N×C tokens of one block.

    Per layer: multi-head self-attention (scores scaled by the inverse
    root of the head dim) with residual, then a two-layer ReLU FFN with
    residual. Attention is dense within the block only.
    """
    n, C = block.shape
    if C != config.channels:
        raise T.TensorError(f"block has {C} channels, config says {config.channels}")
    heads = config.num_heads
    d = C // heads
    scale = 1.0 / math.sqrt(d)
    h = block
    if config.use_positional_embedding:
        h = T.add(h, Tensor(_sincos_embedding(n, C, block.dtype)))
    for lw in weights.layers:
        y = T.layer_norm(h, lw.ln1_g, lw.ln1_b, eps=LN_EPS)
        q = T.matmul(y, lw.wq)
        k = T.matmul(y, lw.wk)
        v = T.matmul(y, lw.wv)
        head_outs = []
        for i in range(heads):
            qh = T.slice_axis(q, 1, i * d, d)
            kh = T.slice_axis(k, 1, i * d, d)
            vh = T.slice_axis(v, 1, i * d, d)
            scores = T.mul(T.matmul(qh, T.transpose2d(kh)), scale)
            attn = T.softmax(scores)
            head_outs.append(T.matmul(attn, vh))
        merged = head_outs[0] if heads == 1 else T.concat(head_outs, axis=1)
        h = T.add(h, T.matmul(merged, lw.wo))
        y2 = T.layer_norm(h, lw.ln2_g, lw.ln2_b, eps=LN_EPS)
        f = T.add_rowvec(T.matmul(y2, lw.ffn1_w), lw.ffn1_b)
        f = T.add_rowvec(T.matmul(T.relu(f), lw.ffn2_w), lw.ffn2_b)
        h = T.add(h, f)
    return h


def transform_blocks(ps: PartitionedSequence, weights: CfsamWeights, config: CfsamConfig) -> PartitionedSequence:
    """Apply the transformer independently to every partition block."""
    outs = []
    for p in range(ps.part):
        blk = T.reshape(
            T.slice_axis(ps.blocks, 0, p, 1), (ps.block_length, config.channels)
        )
        outs.append(transformer_unit(blk, weights, config))
    stacked = T.reshape(
        outs[0] if ps.part == 1 else T.concat(outs, axis=0),
        (ps.part, ps.block_length, config.channels),
    )
    return PartitionedSequence(
        blocks=stacked,
        original_length=ps.original_length,
        padded_length=ps.padded_length,
        part=ps.part,
    )


def combine(ps: PartitionedSequence) -> Tensor:
    """Exact inverse of the stride interleaving, back to C×Length."""
    C = ps.blocks.shape[2]
    flat = T.transpose2d(T.reshape(ps.blocks, (ps.padded_length, C)))  # C × padded, block-major
    idx = partition_indices(ps.padded_length, ps.part)
    inverse = np.empty_like(idx)
    inverse[idx] = np.arange(ps.padded_length)
    restored = T.take(flat, axis=1, indices=inverse)
    if ps.padded_length != ps.original_length:
        restored = T.interp_linear_1d(restored, ps.original_length)
    return restored


# -- stage 3: fusion restoration ---------------------------------------------


def _pointwise(seq: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """1×1 projection along the channel axis of a Cin×Length sequence."""
    return T.transpose2d(T.add_rowvec(T.matmul(T.transpose2d(seq), w), b))


def fuse_restore(L: Tensor, L_prime: Tensor, weights: CfsamWeights, pyramid_shapes) -> FeaturePyramid:
    """Shortcut concat, pointwise re-projection, and per-scale recovery."""
    if L.shape != L_prime.shape:
        raise T.TensorError("fuse_restore: L and L' must have identical shapes")
    length = L.shape[1]
    if sum(h * w for h, w, _ in pyramid_shapes) != length:
        raise T.TensorError(
            f"pyramid shapes imply {sum(h * w for h, w, _ in pyramid_shapes)} tokens, sequence has {length}"
        )
    cat = T.concat([L, L_prime], axis=0)                  # 2C × Length
    R = _pointwise(cat, weights.fuse_w, weights.fuse_b)   # C × Length
    maps = []
    offset = 0
    for (h, w, ci), (rw, rb) in zip(pyramid_shapes, weights.restore):
        if rw.shape[1] != ci:
            raise T.TensorError(
                f"restore projection emits {rw.shape[1]} channels, scale expects {ci}"
            )
        span = T.slice_axis(R, 1, offset, h * w)
        offset += h * w
        restored = _pointwise(span, rw, rb)               # Ci × (h·w)
        maps.append(T.reshape(T.transpose2d(restored), (h, w, ci)))
    return FeaturePyramid(maps)


# -- full pipeline ------------------------------------------------------------


def cfsam_forward(pyramid: FeaturePyramid, weights: CfsamWeights, config: CfsamConfig) -> FeaturePyramid:
    """Local extraction → global partitioned attention → fusion restoration."""
    locals_ = local_extract(pyramid, weights, config)
    L = flatten_concat(locals_)
    ps = partition(L, config.part)
    ps_prime = transform_blocks(ps, weights, config)
    L_prime = combine(ps_prime)
    out = fuse_restore(L, L_prime, weights, pyramid.shapes)
    if config.residual_input:
        out = FeaturePyramid([T.add(o, m) for o, m in zip(out.maps, pyramid.maps)])
    return out
