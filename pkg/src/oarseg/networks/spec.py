from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from enum import Enum


class NetworkKind(str, Enum):
    GENERATOR = "generator"
    DISCRIMINATOR = "discriminator"
    SEG_SUBNET = "seg_subnet"
    INSTANCE_SEG = "instance_seg"


class Fusion(str, Enum):
    NONE = "ct"
    INPUT = "fusion@i"
    FEATURE = "fusion@f"


@dataclass(frozen=True)
class NetworkSpec:
    """Architecture description shared by every builder.

    ``upsample`` is ``"nearest"`` (nearest-neighbour resize followed by a
    3x3 convolution) or ``"transpose"`` (stride-2 transposed convolution,
    kept for comparison).  ``head`` applies to the discriminator only:
    ``"linear"`` for least-squares training, ``"sigmoid"`` for the log form.
    """

    kind: NetworkKind
    in_channels: int = 1
    out_channels: int = 1
    base_channels: int = 64
    depth: int = 3
    upsample: str = "nearest"
    norm: str = "instance"
    head: str = "linear"
    # instance segmentor only
    num_classes: int = 10
    fusion: Fusion = Fusion.NONE
    anchor_sizes: tuple[float, ...] = (6.0, 12.0, 24.0)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        object.__setattr__(self, "kind", NetworkKind(self.kind))
        object.__setattr__(self, "fusion", Fusion(self.fusion))
        object.__setattr__(self, "anchor_sizes", tuple(float(a) for a in self.anchor_sizes))
        if self.depth < 1 or self.base_channels < 1 or self.in_channels < 1:
            raise ValueError("depth, base_channels and in_channels must be >= 1")
        if self.upsample not in ("nearest", "transpose"):
            raise ValueError(f"unknown upsample mode {self.upsample!r}")
        if self.norm not in ("instance", "none"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.head not in ("linear", "sigmoid"):
            raise ValueError(f"unknown discriminator head {self.head!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["kind"] = self.kind.value
        d["fusion"] = self.fusion.value
        d["anchor_sizes"] = list(self.anchor_sizes)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown network spec keys: {sorted(unknown)}")
        return cls(**d)
