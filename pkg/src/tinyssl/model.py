"""MobileNetV2-style student with three feature taps and training heads."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from . import tensor as T

# (expansion t, base output channels c, repeats n, first stride s)
MOBILENET_V2_PLAN = (
    (1, 16, 1, 1),
    (6, 24, 2, 2),
    (6, 32, 3, 2),
    (6, 64, 4, 2),
    (6, 96, 3, 1),
    (6, 160, 3, 2),
    (6, 320, 1, 1),
)


class SpecError(ValueError):
    pass


def round_channels(value, divisor=8):
    """Nearest multiple of ``divisor`` (at least ``divisor``), never more than 10% below ``value``."""
    if value < divisor / 2:
        raise SpecError(f"width multiplier leaves only {value:.2f} channels; need at least {divisor / 2:.0f}")
    rounded = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * value:
        rounded += divisor
    return rounded


@dataclass(frozen=True)
class BackboneSpec:
    width_multiplier: float = 0.35
    input_resolution: int = 128
    stage_plan: tuple = MOBILENET_V2_PLAN
    tap_strides: tuple = (8, 16, 32)
    final_expand_channels: int = 1280
    stem_channels: int = 32

    def __post_init__(self):
        if self.width_multiplier <= 0:
            raise SpecError(f"width multiplier must be positive, got {self.width_multiplier}")
        taps = self.tap_strides
        if len(taps) != 3 or any(a >= b for a, b in zip(taps, taps[1:])):
            raise SpecError(f"need exactly three strictly increasing tap strides, got {taps}")
        reached = {s for s, _ in self._group_strides()}
        missing = [s for s in taps if s not in reached]
        if missing:
            raise SpecError(f"stage plan never reaches tap stride(s) {missing}")
        if self.input_resolution % taps[-1]:
            raise SpecError(f"input resolution {self.input_resolution} not divisible by {taps[-1]}")
        self.channels()  # raises on degenerate widths

    def _group_strides(self):
        stride = 2  # stem
        for gi, (_, _, _, s) in enumerate(self.stage_plan):
            stride *= s
            yield stride, gi

    def channels(self):
        """(stem, per-group output channels) after width scaling."""
        a = self.width_multiplier
        return (round_channels(self.stem_channels * a),
                [round_channels(c * a) for _, c, _, _ in self.stage_plan])

    def tap_groups(self):
        """Index of the last group at each tap stride."""
        last = {}
        for stride, gi in self._group_strides():
            last[stride] = gi
        return [last[s] for s in self.tap_strides]

    def tap_channels(self):
        _, groups = self.channels()
        return [groups[g] for g in self.tap_groups()]

    def tap_resolutions(self, resolution=None):
        r = resolution or self.input_resolution
        return [(r // s, r // s) for s in self.tap_strides]


def micro_spec(width_multiplier=0.35):
    """Desk-scale preset: 32 px input, repeat counts halved (rounded up)."""
    plan = tuple((t, c, max(1, math.ceil(n / 2)), s) for t, c, n, s in MOBILENET_V2_PLAN)
    return BackboneSpec(width_multiplier=width_multiplier, input_resolution=32, stage_plan=plan)


def full_spec(width_multiplier=0.35):
    return BackboneSpec(width_multiplier=width_multiplier, input_resolution=128)


HEAD_KINDS = ("capacity_proportional_linear", "seed_mlp", "none")


@dataclass(frozen=True)
class HeadSpec:
    """Training-time heads. Every head is bias-free except the classifier."""

    proj_dim: int = 256
    teacher_cls_dim: int = 384
    stage_proj_channels: int = 384
    head_kind: str = "capacity_proportional_linear"
    hidden: int = 2048
    align: bool = True
    stage_proj: bool = True
    predictor_hidden: int = 0
    num_classes: int = 0

    def __post_init__(self):
        if self.head_kind not in HEAD_KINDS:
            raise SpecError(f"unknown head kind {self.head_kind!r}")


class InvertedResidual(nn.Module):
    def __init__(self, cin, cout, stride, expansion):
        hidden = cin * expansion
        self.use_residual = stride == 1 and cin == cout
        self.expand = nn.ConvBN(cin, hidden, 1) if expansion != 1 else None
        self.dw = nn.ConvBN(hidden, hidden, 3, stride, depthwise=True)
        self.project = nn.ConvBN(hidden, cout, 1, act=False)

    def __call__(self, x, training):
        y = self.expand(x, training) if self.expand is not None else x
        y = self.project(self.dw(y, training), training)
        return T.add(x, y) if self.use_residual else y


class Backbone(nn.Module):
    def __init__(self, spec: BackboneSpec):
        stem, group_channels = spec.channels()
        self.stem = nn.ConvBN(3, stem, 3, stride=2)
        blocks, cin = [], stem
        self._tap_after = []
        for (t, _, n, s), cout in zip(spec.stage_plan, group_channels):
            for i in range(n):
                blocks.append(InvertedResidual(cin, cout, s if i == 0 else 1, t))
                cin = cout
            self._tap_after.append(len(blocks) - 1)
        self.blocks = blocks
        self.expand = nn.ConvBN(cin, spec.final_expand_channels, 1)
        self._taps = {self._tap_after[g]: k for k, g in enumerate(spec.tap_groups())}

    def __call__(self, x, training):
        y = self.stem(x, training)
        stages = [None, None, None]
        for i, block in enumerate(self.blocks):
            y = block(y, training)
            if i in self._taps:
                stages[self._taps[i]] = y
        y = self.expand(y, training)
        return T.global_avg_pool(y), stages


class StudentNet(nn.Module):
    """Backbone plus heads. Only ``backbone.*`` is kept at deployment."""

    def __init__(self, spec: BackboneSpec, head: HeadSpec):
        self.spec, self.head = spec, head
        self.backbone = Backbone(spec)
        feat = spec.final_expand_channels
        if head.head_kind == "capacity_proportional_linear":
            self.proj = nn.Linear(feat, head.proj_dim)
        elif head.head_kind == "seed_mlp":
            self.proj = nn.MLP(feat, head.hidden, head.proj_dim)
        if head.align:
            self.align = nn.Linear(head.proj_dim, head.teacher_cls_dim)
        if head.stage_proj:
            self.stage_proj = [nn.ConvBN(c, head.stage_proj_channels, 1, act=False)
                               for c in spec.tap_channels()]
        if head.predictor_hidden:
            self.predictor = nn.MLP(head.proj_dim, head.predictor_hidden, head.proj_dim)
        if head.num_classes:
            self.classifier = nn.Linear(feat, head.num_classes, bias=True)

    def deploy_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if n.startswith("backbone.")]

    def training_only_parameters(self):
        return [(n, p) for n, p in self.named_parameters() if not n.startswith("backbone.")]

    @property
    def dtype(self):
        return self.backbone.stem.conv.weight.dtype

    def checksum(self):
        h = hashlib.sha256()
        for name, arr in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr).tobytes())
        return h.hexdigest()


def build_student(spec: BackboneSpec, head: HeadSpec = HeadSpec(), seed: int = 0,
                  dtype=np.float32) -> StudentNet:
    net = StudentNet(spec, head)
    net.init(seed, dtype=dtype)
    nn.cast(net, dtype)
    return net


def _as_input(net, x):
    if not isinstance(x, T.Tensor):
        x = T.Tensor(np.asarray(x, dtype=net.dtype), dtype=net.dtype)
    if x.ndim != 4 or x.shape[1] != 3:
        raise T.ShapeError(f"expected a (B, 3, H, W) batch, got {x.shape}")
    last = net.spec.tap_strides[-1]
    if x.shape[2] % last or x.shape[3] % last:
        raise T.ShapeError(f"input {x.shape[2]}x{x.shape[3]} not divisible by stride {last}")
    return x


def student_forward(net: StudentNet, x, mode="train"):
    """Returns {"h": (B, 1280), "stages": [three (B, C_l, H_l, W_l)]}."""
    h, stages = net.backbone(_as_input(net, x), mode == "train")
    return {"h": h, "stages": stages}


def project_global(net: StudentNet, h):
    """z = l2-normalised projection of the pooled feature."""
    return T.l2_normalize(net.proj(h), axis=1, eps=1e-12)


def align_to_teacher(net: StudentNet, z):
    return net.align(z)


def project_stages(net: StudentNet, stages, mode="train"):
    if len(stages) != len(net.stage_proj):
        raise T.ShapeError(f"expected {len(net.stage_proj)} stages, got {len(stages)}")
    out = []
    for i, (proj, s) in enumerate(zip(net.stage_proj, stages)):
        expected = proj.conv.weight.shape[1]
        if s.ndim != 4 or s.shape[1] != expected:
            raise T.ShapeError(f"stage {i}: expected {expected} channels, got shape {s.shape}")
        out.append(proj(s, mode == "train"))
    return out


@dataclass
class ParamCount:
    all: int
    deploy: int
    training_only: int
    by_group: dict = field(default_factory=dict)


def count_parameters(net: StudentNet) -> ParamCount:
    groups = {}
    for name, p in net.named_parameters():
        key = name.split(".", 1)[0]
        groups[key] = groups.get(key, 0) + p.size
    deploy = sum(p.size for _, p in net.deploy_parameters())
    train = sum(p.size for _, p in net.training_only_parameters())
    return ParamCount(all=deploy + train, deploy=deploy, training_only=train, by_group=groups)
