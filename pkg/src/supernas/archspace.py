"""Transformer search-space modeling.

Factor grids, concrete subnet configurations, analytic parameter/FLOP
accounting, and isomer grouping by per-factor totals. Everything here is a
pure function of immutable inputs; counts are exact Python integers.

Conventions (documented in the README):
  * FLOPs are counted as fused multiply-adds (the usual vision-model
    profiling convention); normalization, softmax, and activation costs are
    ignored.
  * The MLP hidden width is round-half-up of embed_dim * mlp_ratio.
  * A block config is valid only when qkv_dim is divisible by heads, so the
    per-head width is integral.
"""

from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass
from functools import cached_property
from itertools import combinations_with_replacement, product
from math import comb, fsum
from typing import Iterator

from .errors import ArchValidationError, EnumerationCapError, MalformedRangeError

#: Default ceiling for operations that materialize configurations explicitly.
DEFAULT_ENUMERATION_CAP = 1_000_000

_REL_TOL = 1e-9


def _as_number(x: float) -> int | float:
    """Collapse floats holding integral values to int for clean configs/keys."""
    if isinstance(x, bool):
        raise MalformedRangeError("boolean is not a valid factor value")
    if isinstance(x, int):
        return x
    if float(x).is_integer():
        return int(x)
    return float(x)


@dataclass(frozen=True)
class FactorRange:
    """Inclusive arithmetic grid of factor values: lo, lo+step, ..., hi."""

    lo: int | float
    hi: int | float
    step: int | float

    def __post_init__(self) -> None:
        if self.step <= 0:
            raise MalformedRangeError(f"step must be > 0, got {self.step}")
        if self.hi < self.lo:
            raise MalformedRangeError(f"range bounds inverted: lo={self.lo} hi={self.hi}")
        span = (self.hi - self.lo) / self.step
        if abs(span - round(span)) > _REL_TOL * max(1.0, abs(span)):
            raise MalformedRangeError(
                f"(hi - lo) = {self.hi - self.lo} is not an integer multiple of step {self.step}"
            )

    def __len__(self) -> int:
        return round((self.hi - self.lo) / self.step) + 1

    def expand(self) -> list[int | float]:
        n = len(self)
        values = [_as_number(self.lo + i * self.step) for i in range(n)]
        values[-1] = _as_number(self.hi)  # kill step-accumulation drift at the top end
        return values


def expand_range(rng: FactorRange) -> list[int | float]:
    """Ordered list of values described by ``rng``; strictly increasing."""
    return rng.expand()


@dataclass(frozen=True)
class BlockConfig:
    """Per-block variable factors of one transformer block."""

    qkv_dim: int
    mlp_ratio: int | float
    heads: int

    def __post_init__(self) -> None:
        if self.heads <= 0 or self.qkv_dim <= 0:
            raise ArchValidationError(f"nonpositive block factors: {self}")
        if self.qkv_dim % self.heads != 0:
            raise ArchValidationError(
                f"qkv_dim {self.qkv_dim} not divisible by heads {self.heads}"
            )

    @property
    def head_width(self) -> int:
        return self.qkv_dim // self.heads


@dataclass(frozen=True)
class ArchConfig:
    """One concrete subnet: embedding width, depth, and per-block factors."""

    embed_dim: int
    depth: int
    blocks: tuple[BlockConfig, ...]

    def __post_init__(self) -> None:
        if len(self.blocks) != self.depth:
            raise ArchValidationError(
                f"depth {self.depth} != number of blocks {len(self.blocks)}"
            )


@dataclass(frozen=True)
class SearchSpaceSpec:
    """Variable-factor ranges plus the fixed geometry of the family."""

    embed_dim: FactorRange
    qkv_dim: FactorRange
    mlp_ratio: FactorRange
    head_num: FactorRange
    depth: FactorRange
    patch_size: int
    image_resolution: int
    num_classes: int

    def __post_init__(self) -> None:
        if self.patch_size <= 0 or self.image_resolution <= 0:
            raise ArchValidationError("patch size and resolution must be positive")
        if self.image_resolution % self.patch_size != 0:
            raise ArchValidationError(
                f"resolution {self.image_resolution} not divisible by patch {self.patch_size}"
            )
        if self.num_classes < 2:
            raise ArchValidationError("need at least 2 classes")
        for name in ("embed_dim", "qkv_dim", "head_num", "depth"):
            for v in getattr(self, name).expand():
                if not isinstance(v, int) or v <= 0:
                    raise ArchValidationError(f"{name} values must be positive integers, got {v}")
        for v in self.mlp_ratio.expand():
            if v <= 0:
                raise ArchValidationError(f"mlp_ratio values must be positive, got {v}")
        if not self.block_choices:
            raise ArchValidationError(
                "no valid block config: no qkv choice divisible by any head choice"
            )
        q_max = self.qkv_choices[-1]
        if all(q_max % h for h in self.head_choices):
            raise ArchValidationError(
                f"maximal qkv_dim {q_max} divisible by no head choice; maximal subnet undefined"
            )
        q_min = self.qkv_choices[0]
        if all(q_min % h for h in self.head_choices):
            raise ArchValidationError(
                f"minimal qkv_dim {q_min} divisible by no head choice; minimal subnet undefined"
            )

    @cached_property
    def embed_choices(self) -> tuple[int, ...]:
        return tuple(self.embed_dim.expand())

    @cached_property
    def qkv_choices(self) -> tuple[int, ...]:
        return tuple(self.qkv_dim.expand())

    @cached_property
    def mlp_choices(self) -> tuple[int | float, ...]:
        return tuple(self.mlp_ratio.expand())

    @cached_property
    def head_choices(self) -> tuple[int, ...]:
        return tuple(self.head_num.expand())

    @cached_property
    def depth_choices(self) -> tuple[int, ...]:
        return tuple(self.depth.expand())

    @cached_property
    def block_choices(self) -> tuple[BlockConfig, ...]:
        """All valid per-block factor combinations, in deterministic order."""
        return tuple(
            BlockConfig(q, r, h)
            for q in self.qkv_choices
            for r in self.mlp_choices
            for h in self.head_choices
            if q % h == 0
        )

    @property
    def tokens(self) -> int:
        """Sequence length: patch grid plus the class token."""
        return (self.image_resolution // self.patch_size) ** 2 + 1

    @property
    def max_mlp_hidden(self) -> int:
        return mlp_hidden(self.embed_choices[-1], self.mlp_choices[-1])

    @property
    def head_unit(self) -> int:
        """Column width of one head group in the maximal qkv tensors."""
        return self.qkv_choices[-1] // self.head_choices[-1]

    def maximal_arch(self) -> ArchConfig:
        q = self.qkv_choices[-1]
        h = max(h for h in self.head_choices if q % h == 0)
        block = BlockConfig(q, self.mlp_choices[-1], h)
        d = self.depth_choices[-1]
        return ArchConfig(self.embed_choices[-1], d, (block,) * d)

    def minimal_arch(self) -> ArchConfig:
        q = self.qkv_choices[0]
        h = min(h for h in self.head_choices if q % h == 0)
        block = BlockConfig(q, self.mlp_choices[0], h)
        d = self.depth_choices[0]
        return ArchConfig(self.embed_choices[0], d, (block,) * d)

    def to_dict(self) -> dict:
        return {
            "kind": "vit",
            "embed_dim": [self.embed_dim.lo, self.embed_dim.hi, self.embed_dim.step],
            "qkv_dim": [self.qkv_dim.lo, self.qkv_dim.hi, self.qkv_dim.step],
            "mlp_ratio": [self.mlp_ratio.lo, self.mlp_ratio.hi, self.mlp_ratio.step],
            "head_num": [self.head_num.lo, self.head_num.hi, self.head_num.step],
            "depth": [self.depth.lo, self.depth.hi, self.depth.step],
            "patch_size": self.patch_size,
            "image_resolution": self.image_resolution,
            "num_classes": self.num_classes,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SearchSpaceSpec":
        return cls(
            embed_dim=FactorRange(*d["embed_dim"]),
            qkv_dim=FactorRange(*d["qkv_dim"]),
            mlp_ratio=FactorRange(*d["mlp_ratio"]),
            head_num=FactorRange(*d["head_num"]),
            depth=FactorRange(*d["depth"]),
            patch_size=d["patch_size"],
            image_resolution=d["image_resolution"],
            num_classes=d["num_classes"],
        )


def mlp_hidden(embed_dim: int, mlp_ratio: float) -> int:
    """MLP hidden width: round-half-up of embed * ratio."""
    return int(math.floor(embed_dim * mlp_ratio + 0.5))


def validate_arch(arch: ArchConfig, spec: SearchSpaceSpec) -> None:
    """Raise ArchValidationError unless ``arch`` is drawn from ``spec``."""
    if arch.embed_dim not in spec.embed_choices:
        raise ArchValidationError(f"embed_dim {arch.embed_dim} not in {spec.embed_choices}")
    if arch.depth not in spec.depth_choices:
        raise ArchValidationError(f"depth {arch.depth} not in {spec.depth_choices}")
    for i, b in enumerate(arch.blocks):
        if b.qkv_dim not in spec.qkv_choices:
            raise ArchValidationError(f"block {i}: qkv_dim {b.qkv_dim} not in {spec.qkv_choices}")
        if b.heads not in spec.head_choices:
            raise ArchValidationError(f"block {i}: heads {b.heads} not in {spec.head_choices}")
        if not any(_ratio_eq(b.mlp_ratio, r) for r in spec.mlp_choices):
            raise ArchValidationError(
                f"block {i}: mlp_ratio {b.mlp_ratio} not in {spec.mlp_choices}"
            )


def _ratio_eq(a: float, b: float) -> bool:
    return abs(float(a) - float(b)) <= _REL_TOL * max(1.0, abs(float(b)))


@dataclass(frozen=True)
class ResourceReport:
    """Analytic resource consumption of one subnet."""

    params: int
    flops: int


def count_params(arch: ArchConfig, spec: SearchSpaceSpec) -> int:
    """Exact parameter count of ``arch`` (biases and norm affines included)."""
    validate_arch(arch, spec)
    e = arch.embed_dim
    patch_dim = 3 * spec.patch_size**2
    total = patch_dim * e + e          # patch embedding
    total += spec.tokens * e           # positional embedding
    total += e                         # class token
    for b in arch.blocks:
        q = b.qkv_dim
        h = mlp_hidden(e, b.mlp_ratio)
        total += 3 * (e * q + q)       # q/k/v projections
        total += q * e + e             # attention output projection
        total += e * h + h + h * e + e # two-layer MLP
        total += 4 * e                 # two layer norms
    total += 2 * e                     # final norm
    total += e * spec.num_classes + spec.num_classes
    return total


def count_flops(arch: ArchConfig, spec: SearchSpaceSpec) -> int:
    """Forward-pass FLOPs (one fused multiply-add = one FLOP), matmuls only."""
    validate_arch(arch, spec)
    e = arch.embed_dim
    patches = (spec.image_resolution // spec.patch_size) ** 2
    t = patches + 1
    total = patches * (3 * spec.patch_size**2) * e  # patch embedding
    for b in arch.blocks:
        q = b.qkv_dim
        h = mlp_hidden(e, b.mlp_ratio)
        total += 3 * t * e * q         # q/k/v projections
        total += t * t * q             # attention scores
        total += t * t * q             # attention-weighted values
        total += t * q * e             # output projection
        total += 2 * t * e * h         # MLP
    total += e * spec.num_classes      # classifier on the class token
    return total


def resource_report(arch: ArchConfig, spec: SearchSpaceSpec) -> ResourceReport:
    return ResourceReport(params=count_params(arch, spec), flops=count_flops(arch, spec))


@dataclass(frozen=True)
class IsomerKey:
    """Group label shared by all block reorderings (and equal-total relabelings)."""

    embed_dim: int
    depth: int
    total_heads: int
    total_mlp_ratio: int | float
    total_qkv_dim: int

    def sort_key(self) -> tuple:
        return (
            self.embed_dim,
            self.depth,
            self.total_qkv_dim,
            float(self.total_mlp_ratio),
            self.total_heads,
        )


def _blocks_key(embed_dim: int, blocks: tuple[BlockConfig, ...]) -> IsomerKey:
    # fsum over sorted ratios keeps float totals identical for any reordering
    return IsomerKey(
        embed_dim=embed_dim,
        depth=len(blocks),
        total_heads=sum(b.heads for b in blocks),
        total_mlp_ratio=_as_number(fsum(sorted(float(b.mlp_ratio) for b in blocks))),
        total_qkv_dim=sum(b.qkv_dim for b in blocks),
    )


def isomer_key(arch: ArchConfig) -> IsomerKey:
    """Key fields: embed dim, depth, and per-factor sums over blocks."""
    return _blocks_key(arch.embed_dim, arch.blocks)


def enumerate_isomer_groups(
    spec: SearchSpaceSpec,
    embed: int,
    depth: int,
    cap: int = DEFAULT_ENUMERATION_CAP,
) -> list[tuple[IsomerKey, int]]:
    """Partition the (embed, depth) slice into isomer groups with exact counts.

    Iterates block-choice multisets (cardinality by multinomial), so the cost
    is C(choices + depth - 1, depth) rather than choices**depth.
    """
    if embed not in spec.embed_choices:
        raise ArchValidationError(f"embed {embed} not in {spec.embed_choices}")
    if depth not in spec.depth_choices:
        raise ArchValidationError(f"depth {depth} not in {spec.depth_choices}")
    combos = spec.block_choices
    n_multisets = comb(len(combos) + depth - 1, depth)
    if n_multisets > cap:
        raise EnumerationCapError(
            f"{n_multisets} block multisets exceed the enumeration cap {cap}"
        )
    d_fact = math.factorial(depth)
    groups: dict[IsomerKey, int] = {}
    for multiset in combinations_with_replacement(combos, depth):
        card = d_fact
        for c in Counter(multiset).values():
            card //= math.factorial(c)
        key = _blocks_key(embed, multiset)
        groups[key] = groups.get(key, 0) + card
    return sorted(groups.items(), key=lambda kv: kv[0].sort_key())


def space_cardinality(spec: SearchSpaceSpec) -> int:
    """Exact number of architectures in the space (big-integer arithmetic)."""
    k = len(spec.block_choices)
    per_embed = sum(k**d for d in spec.depth_choices)
    return len(spec.embed_choices) * per_embed


def iter_archs(spec: SearchSpaceSpec, cap: int = DEFAULT_ENUMERATION_CAP) -> Iterator[ArchConfig]:
    """Yield every architecture explicitly; refuses above ``cap``."""
    total = space_cardinality(spec)
    if total > cap:
        raise EnumerationCapError(f"{total} architectures exceed the enumeration cap {cap}")
    for e in spec.embed_choices:
        for d in spec.depth_choices:
            for blocks in product(spec.block_choices, repeat=d):
                yield ArchConfig(e, d, blocks)


def _fmt_num(x: int | float) -> str:
    return format(x, "g")


def arch_id(arch: ArchConfig) -> str:
    """Compact, parseable identity string for CSV logs and reports."""
    qs = ",".join(_fmt_num(b.qkv_dim) for b in arch.blocks)
    hs = ",".join(_fmt_num(b.heads) for b in arch.blocks)
    ms = ",".join(_fmt_num(b.mlp_ratio) for b in arch.blocks)
    return f"e{arch.embed_dim}-d{arch.depth}-q{qs}-h{hs}-m{ms}"


def parse_arch_id(s: str) -> ArchConfig:
    try:
        e_part, d_part, q_part, h_part, m_part = s.split("-")
        embed = int(e_part[1:])
        depth = int(d_part[1:])
        qs = [int(x) for x in q_part[1:].split(",")]
        hs = [int(x) for x in h_part[1:].split(",")]
        ms = [_as_number(float(x)) for x in m_part[1:].split(",")]
    except (ValueError, IndexError) as exc:
        raise ArchValidationError(f"unparseable arch id {s!r}") from exc
    if not (len(qs) == len(hs) == len(ms) == depth):
        raise ArchValidationError(f"arch id {s!r} has inconsistent block counts")
    blocks = tuple(BlockConfig(q, m, h) for q, m, h in zip(qs, ms, hs))
    return ArchConfig(embed, depth, blocks)
