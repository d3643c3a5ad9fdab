"""Weight-entangled supernet: maximal tensors, subnet views, forward pass.

The supernet owns one maximal-size buffer per parameter. A subnet view
addresses leading-index slices of those buffers (first e embedding channels,
first q qkv columns, first round-half-up(e*ratio) MLP columns, first d
blocks), so every subnet shares storage with every overlapping subnet and an
in-place update through one view is observable through all others.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .archspace import ArchConfig, SearchSpaceSpec, mlp_hidden, validate_arch
from .autodiff import Tensor
from .errors import ArchValidationError, ShapeError

INIT_STD = 0.02


def param_shapes(spec: SearchSpaceSpec) -> dict[str, tuple[int, ...]]:
    """Maximal tensor layout, in deterministic construction order."""
    e = spec.embed_choices[-1]
    q = spec.qkv_choices[-1]
    h = spec.max_mlp_hidden
    d = spec.depth_choices[-1]
    patch_dim = 3 * spec.patch_size**2
    shapes: dict[str, tuple[int, ...]] = {
        "patch_embed.weight": (patch_dim, e),
        "patch_embed.bias": (e,),
        "pos_embed": (spec.tokens, e),
        "cls_token": (e,),
    }
    for i in range(d):
        p = f"blocks.{i}."
        shapes[p + "norm1.scale"] = (e,)
        shapes[p + "norm1.shift"] = (e,)
        for proj in ("q", "k", "v"):
            shapes[p + f"attn.{proj}.weight"] = (e, q)
            shapes[p + f"attn.{proj}.bias"] = (q,)
        shapes[p + "attn.out.weight"] = (q, e)
        shapes[p + "attn.out.bias"] = (e,)
        shapes[p + "norm2.scale"] = (e,)
        shapes[p + "norm2.shift"] = (e,)
        shapes[p + "mlp.fc1.weight"] = (e, h)
        shapes[p + "mlp.fc1.bias"] = (h,)
        shapes[p + "mlp.fc2.weight"] = (h, e)
        shapes[p + "mlp.fc2.bias"] = (e,)
    shapes["norm.scale"] = (e,)
    shapes["norm.shift"] = (e,)
    shapes["head.weight"] = (e, spec.num_classes)
    shapes["head.bias"] = (spec.num_classes,)
    return shapes


@dataclass
class SupernetWeights:
    """Maximal-dimension parameter storage plus its provenance."""

    spec: SearchSpaceSpec
    seed: int
    params: dict[str, np.ndarray]

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def total_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _trunc_normal(gen: np.random.Generator, shape: tuple[int, ...], std: float) -> np.ndarray:
    """Normal(0, std) with resampling outside +-2 std."""
    out = gen.normal(0.0, std, size=shape)
    bound = 2.0 * std
    bad = np.abs(out) > bound
    while bad.any():
        out[bad] = gen.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > bound
    return out


def init_supernet(spec: SearchSpaceSpec, seed: int, dtype=np.float32) -> SupernetWeights:
    """Deterministic initialization: trunc-normal projections and tokens,
    zero biases and norm shifts, unit norm scales. Draws happen in float64 in
    layout order, then cast, so float32 and float64 supernets share values.
    """
    gen = np.random.Generator(np.random.PCG64(seed))
    params: dict[str, np.ndarray] = {}
    for name, shape in param_shapes(spec).items():
        if name.endswith(".scale"):
            arr = np.ones(shape)
        elif name.endswith((".bias", ".shift")):
            arr = np.zeros(shape)
        else:  # projection weights, positional embedding, class token
            arr = _trunc_normal(gen, shape, INIT_STD)
        params[name] = arr.astype(dtype)
    return SupernetWeights(spec=spec, seed=seed, params=params)


def slice_table(arch: ArchConfig, spec: SearchSpaceSpec) -> dict[str, tuple[slice, ...]]:
    """Leading-index slice per parameter the subnet inherits."""
    validate_arch(arch, spec)
    e = arch.embed_dim
    se = slice(0, e)
    table: dict[str, tuple[slice, ...]] = {
        "patch_embed.weight": (slice(None), se),
        "patch_embed.bias": (se,),
        "pos_embed": (slice(None), se),
        "cls_token": (se,),
    }
    for i, b in enumerate(arch.blocks):
        p = f"blocks.{i}."
        sq = slice(0, b.qkv_dim)
        sh = slice(0, mlp_hidden(e, b.mlp_ratio))
        table[p + "norm1.scale"] = (se,)
        table[p + "norm1.shift"] = (se,)
        for proj in ("q", "k", "v"):
            table[p + f"attn.{proj}.weight"] = (se, sq)
            table[p + f"attn.{proj}.bias"] = (sq,)
        table[p + "attn.out.weight"] = (sq, se)
        table[p + "attn.out.bias"] = (se,)
        table[p + "norm2.scale"] = (se,)
        table[p + "norm2.shift"] = (se,)
        table[p + "mlp.fc1.weight"] = (se, sh)
        table[p + "mlp.fc1.bias"] = (sh,)
        table[p + "mlp.fc2.weight"] = (sh, se)
        table[p + "mlp.fc2.bias"] = (se,)
    table["norm.scale"] = (se,)
    table["norm.shift"] = (se,)
    table["head.weight"] = (se, slice(None))
    table["head.bias"] = (slice(None),)
    return table


@dataclass
class SubnetView:
    """One architecture's window into the shared supernet storage."""

    arch: ArchConfig
    weights: SupernetWeights
    slices: dict[str, tuple[slice, ...]]
    tensors: dict[str, Tensor] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.tensors:
            # numpy basic slicing yields views: writes through any tensor's
            # .data land in the supernet buffers
            self.tensors = {
                name: Tensor(self.weights.params[name][sl], requires_grad=True)
                for name, sl in self.slices.items()
            }

    def param_count(self) -> int:
        return sum(t.size for t in self.tensors.values())


def slice_subnet(weights: SupernetWeights, arch: ArchConfig) -> SubnetView:
    """View of the first-d blocks / leading channels that ``arch`` inherits."""
    try:
        table = slice_table(arch, weights.spec)
    except ArchValidationError as exc:
        raise ArchValidationError(f"cannot slice subnet: {exc}") from exc
    return SubnetView(arch=arch, weights=weights, slices=table)


def patchify(images: np.ndarray, patch: int) -> np.ndarray:
    """(B, 3, R, R) images -> (B, (R/patch)^2, 3*patch*patch) rows."""
    if images.ndim != 4 or images.shape[1] != 3:
        raise ShapeError(f"expected (batch, 3, R, R) images, got {images.shape}")
    b, c, r, r2 = images.shape
    if r != r2 or r % patch != 0:
        raise ShapeError(f"resolution {r}x{r2} incompatible with patch {patch}")
    g = r // patch
    x = images.reshape(b, c, g, patch, g, patch)
    x = x.transpose(0, 2, 4, 1, 3, 5)
    return np.ascontiguousarray(x).reshape(b, g * g, c * patch * patch)


def _affine(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    return ad.add(ad.mul(x, scale), shift)


def forward_tensors(
    params: Mapping[str, Tensor],
    arch: ArchConfig,
    spec: SearchSpaceSpec,
    images: np.ndarray,
    labels: np.ndarray,
    label_smoothing: float = 0.0,
) -> tuple[Tensor, Tensor]:
    """Forward pass over an explicit parameter mapping.

    Shared by subnet views and by standalone (copied-slice) networks, so the
    two are comparable tensor-for-tensor.
    """
    if images.shape[-1] != spec.image_resolution:
        raise ShapeError(
            f"batch resolution {images.shape[-1]} != spec resolution {spec.image_resolution}"
        )
    dtype = params["patch_embed.weight"].dtype
    batch = images.shape[0]
    e = arch.embed_dim

    x = ad.Tensor(patchify(images.astype(dtype, copy=False), spec.patch_size))
    x = ad.add(ad.matmul(x, params["patch_embed.weight"]), params["patch_embed.bias"])
    cls = ad.broadcast_batch(ad.reshape(params["cls_token"], (1, e)), batch)
    x = ad.concat([cls, x], axis=1)
    x = ad.add(x, params["pos_embed"])
    tokens = spec.tokens

    for i, blk in enumerate(arch.blocks):
        p = f"blocks.{i}."
        q_dim, heads = blk.qkv_dim, blk.heads
        head_w = q_dim // heads

        h = _affine(ad.layernorm(x), params[p + "norm1.scale"], params[p + "norm1.shift"])
        qkv = []
        for proj in ("q", "k", "v"):
            y = ad.add(
                ad.matmul(h, params[p + f"attn.{proj}.weight"]),
                params[p + f"attn.{proj}.bias"],
            )
            y = ad.transpose(ad.reshape(y, (batch, tokens, heads, head_w)), (0, 2, 1, 3))
            qkv.append(y)
        att = ad.attention(*qkv)
        att = ad.reshape(ad.transpose(att, (0, 2, 1, 3)), (batch, tokens, q_dim))
        att = ad.add(ad.matmul(att, params[p + "attn.out.weight"]), params[p + "attn.out.bias"])
        x = ad.add(x, att)

        h = _affine(ad.layernorm(x), params[p + "norm2.scale"], params[p + "norm2.shift"])
        h = ad.gelu(ad.add(ad.matmul(h, params[p + "mlp.fc1.weight"]), params[p + "mlp.fc1.bias"]))
        h = ad.add(ad.matmul(h, params[p + "mlp.fc2.weight"]), params[p + "mlp.fc2.bias"])
        x = ad.add(x, h)

    x = _affine(ad.layernorm(x), params["norm.scale"], params["norm.shift"])
    cls_out = ad.take(x, 0, axis=1)
    logits = ad.add(ad.matmul(cls_out, params["head.weight"]), params["head.bias"])
    loss = ad.cross_entropy(logits, labels, label_smoothing=label_smoothing)
    return logits, loss


def forward(
    view: SubnetView,
    images: np.ndarray,
    labels: np.ndarray,
    label_smoothing: float = 0.0,
) -> tuple[Tensor, Tensor]:
    """(logits, cross-entropy loss) of the sliced subnet on one batch."""
    return forward_tensors(
        view.tensors, view.arch, view.weights.spec, images, labels, label_smoothing
    )
