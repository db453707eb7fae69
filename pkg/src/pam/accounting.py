"""Trainable-parameter and multiply counts for blocks, placements and models."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .backbone import (BackboneConfig, Model, PamOptions, PlacementPlan, build_model,
                       parse_placement)
from .blocks import CAM, DREAM, DRM, PAM
from .nn import Linear, Module
from .tensor import ConvSpec

# published parameter deltas, keyed by configuration label
PUBLISHED_DELTAS = {
    "PAM12": 6_976,
    "PAM34": 58_624,
    "PAM1234": 65_600,
    "PAM123": 21_056,
    "PAM124": 51_520,
    "PAM12-C": 372_160,
    "PAM12-D": 6_976,
    "DREAM": 525_312,
}


def count_params(obj) -> int:
    """Number of trainable scalars; batch-norm running statistics are not counted."""
    if isinstance(obj, Module):
        return sum(int(p.data.size) for p in obj.parameters())
    return sum(count_params(o) for o in obj)


def count_macs(spec: ConvSpec, h: int, w: int) -> int:
    """Multiplications of one convolution: ``H_out * W_out * C_out * (C_in / groups) * k^2``."""
    ho, wo = spec.output_size(h, w)
    return ho * wo * spec.out_channels * (spec.in_channels // spec.groups) * spec.kernel_size ** 2


def _linear_macs(layer: Linear) -> int:
    return int(layer.weight.data.size)


def block_macs(block: Module, h: int, w: int) -> int:
    """Multiplications of one PAM/DRM/CAM/DREAM application on an ``h x w`` map."""
    if isinstance(block, PAM):
        return sum(block_macs(b, h, w) for b in (block.drm, block.cam) if b is not None)
    if isinstance(block, DRM):
        return count_macs(block.dconv1.spec, h, w) + count_macs(block.dconv2.spec, h, w)
    if isinstance(block, CAM):
        mlp = 2 * block.channels * (block.channels // block.reduction)
        return mlp * (2 if block.variant == "cbam" else 1)
    if isinstance(block, DREAM):
        return _linear_macs(block.fc1) + _linear_macs(block.fc2)
    raise TypeError(f"block_macs: unsupported block {type(block).__name__}")


def stage_resolution(cfg: BackboneConfig, stage: int) -> int:
    """Spatial extent of the feature map at the end of ``stage`` (1-based)."""
    return cfg.input_size // (cfg.stem_stride * 2 ** stage)


def trunk_macs(model: Model) -> int:
    cfg = model.cfg
    hw = cfg.input_size
    total = count_macs(model.stem_conv.spec, hw, hw)
    hw = model.stem_conv.spec.output_size(hw, hw)[0]
    for blocks in model.stages:
        for blk in blocks:
            total += count_macs(blk.conv1.spec, hw, hw)
            total += count_macs(blk.conv2.spec, hw, hw)
            if blk.short_conv is not None:
                total += count_macs(blk.short_conv.spec, hw, hw)
            hw = blk.conv2.spec.output_size(hw, hw)[0]
    return total + _linear_macs(model.head_fc)


@dataclass(frozen=True)
class CostEntry:
    name: str
    params: int
    macs: int


@dataclass
class CostReport:
    name: str
    entries: list = field(default_factory=list)

    @property
    def params(self) -> int:
        return sum(e.params for e in self.entries)

    @property
    def macs(self) -> int:
        return sum(e.macs for e in self.entries)

    def entry(self, name: str) -> Optional[CostEntry]:
        return next((e for e in self.entries if e.name == name), None)


def model_report(model: Model, name: Optional[str] = None) -> CostReport:
    """Per-block costs of a constructed model, walking its parameter arrays."""
    cfg = model.cfg
    trunk_params = count_params(model) - sum(int(p.data.size) for _, p in model.pam_parameters())
    entries = [CostEntry("trunk", trunk_params, trunk_macs(model))]
    for s in range(1, 5):
        pam = model.pam(s)
        if pam is not None:
            hw = stage_resolution(cfg, s)
            entries.append(CostEntry(f"pam{s}", count_params(pam), block_macs(pam, hw, hw)))
    if model.dream is not None:
        entries.append(CostEntry("dream", count_params(model.dream), block_macs(model.dream, 1, 1)))
    return CostReport(name or _plan_label(model.plan, model.options), entries)


def _plan_label(plan: PlacementPlan, options: PamOptions) -> str:
    if options.dream and not plan.stages_with_pam:
        return "DREAM"
    label = plan.render()
    if plan.stages_with_pam and options.conv == "dense":
        label += "-C"
    if options.dream:
        label += "+DREAM"
    return label


def placement_report(plan: PlacementPlan, cfg: BackboneConfig = BackboneConfig.reference(),
                     options: PamOptions = PamOptions(), include_trunk: bool = False) -> CostReport:
    """Costs of the blocks a placement adds, from freshly constructed (zero) blocks.

    With ``include_trunk`` the whole model is built and its trunk echoed too.
    """
    if include_trunk:
        model = build_model(cfg, plan, 0, options, initialize=False, dtype=np.float32)
        return model_report(model)
    entries = []
    for s in sorted(plan.stages_with_pam):
        c = cfg.stage_channels[s - 1]
        pam = PAM(c, None, conv=options.conv, cam_variant=options.cam_variant,
                  identity_mapping=options.identity_mapping, reduction=options.reduction,
                  use_drm=options.use_drm, use_cam=options.use_cam, dtype=np.float32)
        hw = stage_resolution(cfg, s)
        entries.append(CostEntry(f"pam{s}", count_params(pam), block_macs(pam, hw, hw)))
    if options.dream:
        dream = DREAM(cfg.embedding_dim, None, dtype=np.float32)
        entries.append(CostEntry("dream", count_params(dream), block_macs(dream, 1, 1)))
    return CostReport(_plan_label(plan, options), entries)


@dataclass(frozen=True)
class ComparisonRow:
    name: str
    params: int
    macs: int
    delta_params: int
    delta_macs: int


def compare(reports: Sequence[CostReport], baseline: str = "baseline") -> list[ComparisonRow]:
    """Delta of each report against the one named ``baseline``."""
    if len(reports) < 2:
        raise ValueError("compare: need at least two reports")
    base = next((r for r in reports if r.name == baseline), None)
    if base is None:
        raise ValueError(f"compare: no report named {baseline!r}")
    return [ComparisonRow(r.name, r.params, r.macs, r.params - base.params, r.macs - base.macs)
            for r in reports]


def render_table(rows: Iterable[ComparisonRow]) -> str:
    """Aligned text table with Methods, Params and Delta columns."""
    rows = list(rows)
    header = ("Methods", "Params", "Delta", "MACs", "Delta MACs")
    body = [(r.name, f"{r.params:,}", f"+ {r.delta_params:,}" if r.delta_params >= 0
             else f"- {-r.delta_params:,}", f"{r.macs:,}", f"{r.delta_macs:+,}") for r in rows]
    widths = [max(len(x) for x in col) for col in zip(header, *body)]
    fmt = "  ".join(("{:<%d}" if i == 0 else "{:>%d}") % w for i, w in enumerate(widths))
    lines = [fmt.format(*header), "-" * (sum(widths) + 2 * (len(widths) - 1))]
    lines += [fmt.format(*b) for b in body]
    return "\n".join(lines)


def render_records(rows: Iterable[ComparisonRow]) -> str:
    """One ``key=value`` record per line, machine readable."""
    return "\n".join(
        f"name={r.name} params={r.params} macs={r.macs} delta_params={r.delta_params} "
        f"delta_macs={r.delta_macs}" for r in rows)


def parse_records(text: str) -> list[dict]:
    out = []
    for line in text.strip().splitlines():
        rec = dict(kv.split("=", 1) for kv in line.split())
        out.append({k: (v if k == "name" else int(v)) for k, v in rec.items()})
    return out


def published_reports() -> dict[str, CostReport]:
    """Constructed-block reports for every configuration with a published parameter delta."""
    cfg = BackboneConfig.reference()
    reps = {}
    for text in ("PAM12", "PAM34", "PAM1234", "PAM123", "PAM124"):
        reps[text] = placement_report(parse_placement(text), cfg)
    p12 = parse_placement("PAM12")
    reps["PAM12-C"] = placement_report(p12, cfg, PamOptions(conv="dense"))
    reps["PAM12-D"] = placement_report(p12, cfg, PamOptions(conv="depthwise"))
    reps["DREAM"] = placement_report(PlacementPlan(), cfg, PamOptions(dream=True))
    return reps


def check_published() -> list[tuple[str, int, int]]:
    """``(name, expected, counted)`` for each published delta; callers test equality."""
    reps = published_reports()
    return [(k, v, reps[k].params) for k, v in PUBLISHED_DELTAS.items()]
