"""Parameter counts and memory arithmetic for heads, optimiser state and INT8 deployment.

Everything here is an exact integer computed from the architecture; no
training or initialisation is needed (networks are built but never run).
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

from .model import BackboneSpec, HeadSpec, StudentNet, full_spec

# Deployed backbone size quoted for the INT8 benchmark. It does not follow
# from the MobileNetV2 layer arithmetic (see backbone_breakdown); it is kept
# as the reference denominator for head ratios so both figures stay visible.
REFERENCE_DEPLOY_PARAMS = 386_662

KIB = 1024


@dataclass(frozen=True)
class Platform:
    name: str
    flash_kib: float
    sram_kib: float


# Datasheet capacities (largest common part of each family); override per report.
DEFAULT_PLATFORMS = (
    Platform("STM32H7", 2048, 1024),
    Platform("ESP32-S3", 8192, 512),
    Platform("MAX78000", 512, 128),
)


def parse_platform(text):
    """``name:flash_kib:sram_kib`` -> Platform."""
    try:
        name, flash, sram = text.split(":")
        return Platform(name, float(flash), float(sram))
    except ValueError:
        raise ValueError(f"platform must be name:flash_kib:sram_kib, got {text!r}") from None


def _net(spec_or_net, head: HeadSpec | None = None):
    if isinstance(spec_or_net, StudentNet):
        return spec_or_net
    return StudentNet(spec_or_net, head or HeadSpec())


def count_params(spec_or_net, subset="all", head: HeadSpec | None = None):
    """Exact parameter count of ``subset`` in {"deploy", "training_only", "all"}."""
    net = _net(spec_or_net, head)
    if subset == "deploy":
        return sum(p.size for _, p in net.deploy_parameters())
    if subset == "training_only":
        return sum(p.size for _, p in net.training_only_parameters())
    if subset == "all":
        return sum(p.size for _, p in net.named_parameters())
    raise ValueError(f"subset must be deploy, training_only or all; got {subset!r}")


def head_params(head_kind, feat=1280, proj_dim=256, hidden=2048):
    """Projection-head size alone (the part that scales with head_kind)."""
    if head_kind == "capacity_proportional_linear":
        return feat * proj_dim
    if head_kind == "seed_mlp":
        return feat * hidden + hidden * proj_dim
    if head_kind == "none":
        return 0
    raise ValueError(f"unknown head kind {head_kind!r}")


def align_params(teacher_cls_dim=384, proj_dim=256):
    return teacher_cls_dim * proj_dim


def head_ratio(head_kind, backbone_params, **dims):
    if backbone_params <= 0:
        raise ValueError("backbone parameter count must be positive")
    return head_params(head_kind, **dims) / backbone_params


def optimizer_state_bytes(param_count, buffers=2, bytes_per=4):
    if min(param_count, buffers, bytes_per) < 0:
        raise ValueError("optimizer_state_bytes arguments must be >= 0")
    return param_count * buffers * bytes_per


def int8_report(deploy_params, overhead_bytes=0, platforms=DEFAULT_PLATFORMS, sram_need_bytes=0):
    """Flash bytes at one byte per weight plus overhead, and fits/exceeds verdicts."""
    flash = deploy_params + overhead_bytes
    verdicts = []
    for p in platforms:
        verdicts.append({
            "platform": p.name,
            "flash_kib": p.flash_kib,
            "sram_kib": p.sram_kib,
            "flash": "fits" if flash <= p.flash_kib * KIB else "exceeds",
            "sram": "fits" if sram_need_bytes <= p.sram_kib * KIB else "exceeds",
        })
    return {"flash_bytes": flash, "flash_kib": flash / KIB, "verdicts": verdicts}


def backbone_breakdown(spec: BackboneSpec):
    """Backbone count split into conv weights and batch-norm affine parameters."""
    net = StudentNet(spec, HeadSpec(head_kind="none", align=False, stage_proj=False))
    conv = bn = expand = 0
    for name, p in net.deploy_parameters():
        if name.endswith(".weight"):
            conv += p.size
            if name.startswith("backbone.expand."):
                expand += p.size
        else:
            bn += p.size
    return {"total": conv + bn, "conv_weights": conv, "bn_affine": bn,
            "bn_folded": conv + bn // 2, "final_expand_conv": expand}


@dataclass
class BudgetReport:
    alpha: float
    backbone_params: int
    deploy_params: int
    breakdown: dict
    heads: dict  # head_kind -> head params
    training_only: dict  # head_kind -> all training-only params of a CA-DSSL / SEED student
    ratios: dict  # head_kind -> (ratio vs computed backbone, ratio vs reference deploy count)
    optimizer_bytes: dict  # head_kind -> AdamW state bytes for its training-only params
    int8: dict
    int8_reference: dict


def budget_report(alpha=0.35, overhead_bytes=0, platforms=DEFAULT_PLATFORMS, resolution=128):
    spec = full_spec(alpha) if resolution == 128 else BackboneSpec(alpha, resolution)
    breakdown = backbone_breakdown(spec)
    backbone = breakdown["total"]
    heads, train_only, ratios, opt = {}, {}, {}, {}
    for kind in ("capacity_proportional_linear", "seed_mlp"):
        heads[kind] = head_params(kind)
        head = HeadSpec(head_kind=kind, stage_proj=kind == "capacity_proportional_linear")
        train_only[kind] = count_params(spec, "training_only", head)
        ratios[kind] = (heads[kind] / backbone, heads[kind] / REFERENCE_DEPLOY_PARAMS)
        opt[kind] = optimizer_state_bytes(heads[kind])
    return BudgetReport(
        alpha=alpha,
        backbone_params=backbone,
        deploy_params=backbone,
        breakdown=breakdown,
        heads=heads,
        training_only=train_only,
        ratios=ratios,
        optimizer_bytes=opt,
        int8=int8_report(backbone, overhead_bytes, platforms, opt["seed_mlp"]),
        int8_reference=int8_report(REFERENCE_DEPLOY_PARAMS, overhead_bytes, platforms, opt["seed_mlp"]),
    )


def report_rows(rep: BudgetReport, head_kinds=("capacity_proportional_linear", "seed_mlp")):
    rows = [
        ("backbone_params", rep.backbone_params, "all backbone tensors (conv weights + BN affine)"),
        ("backbone_conv_weights", rep.breakdown["conv_weights"], "conv weights only"),
        ("backbone_bn_affine", rep.breakdown["bn_affine"], "BN scale + shift"),
        ("backbone_bn_folded", rep.breakdown["bn_folded"], "conv weights + one bias per BN channel"),
        ("reference_deploy_params", REFERENCE_DEPLOY_PARAMS,
         f"reference deploy count; differs from backbone_params by {rep.backbone_params - REFERENCE_DEPLOY_PARAMS:+d}"),
    ]
    for kind in head_kinds:
        r_own, r_ref = rep.ratios[kind]
        rows += [
            (f"head[{kind}]", rep.heads[kind], "projection head, no biases"),
            (f"ratio[{kind}]", f"{r_ref:.1f}x",
             f"{r_ref:.4f} vs reference deploy count; {r_own:.4f} vs backbone_params"),
            (f"training_only[{kind}]", rep.training_only[kind], "all heads dropped at deployment"),
            (f"adamw_state_bytes[{kind}]", rep.optimizer_bytes[kind],
             f"{rep.optimizer_bytes[kind] / 2 ** 20:.2f} MiB = params x 2 buffers x 4 bytes"
             + ("; one buffer alone is "
                f"{rep.optimizer_bytes[kind] // 2:,} bytes, which is the quoted ~12 MB figure"
                if kind == "seed_mlp" else "")),
        ]
    if "capacity_proportional_linear" in head_kinds:
        both = rep.heads["capacity_proportional_linear"] + align_params()
        rows += [
            ("align_head", align_params(), "teacher-alignment map, 384 x 256, no bias"),
            ("projection_plus_align", both, "the two global-embedding heads together"),
            ("adamw_state_bytes[projection_plus_align]", optimizer_state_bytes(both),
             f"{optimizer_state_bytes(both) / 2 ** 20:.2f} MiB"),
        ]
    rows.append(("int8_flash_kib", f"{rep.int8['flash_kib']:.2f}", f"{rep.int8['flash_bytes']} bytes at 1 byte/weight"))
    rows.append(("int8_flash_kib_reference", f"{rep.int8_reference['flash_kib']:.2f}",
                 f"{rep.int8_reference['flash_bytes']} bytes (reference deploy count)"))
    for v in rep.int8["verdicts"]:
        rows.append((f"platform[{v['platform']}]", f"flash {v['flash']}",
                     f"{v['flash_kib']:g} KiB flash; {v['sram_kib']:g} KiB SRAM vs seed_mlp AdamW state: {v['sram']}"))
    return rows


def format_table(rows):
    w0 = max(len(str(r[0])) for r in rows)
    w1 = max(len(f"{r[1]:,}" if isinstance(r[1], int) else str(r[1])) for r in rows)
    lines = []
    for name, value, note in rows:
        shown = f"{value:,}" if isinstance(value, int) else str(value)
        lines.append(f"{name:<{w0}}  {shown:>{w1}}  {note}")
    return "\n".join(lines) + "\n"


def format_csv(rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["quantity", "value", "note"])
    w.writerows(rows)
    return buf.getvalue()
