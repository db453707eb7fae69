"""Four-stage IR-style residual backbone with PAM insertion at stage ends."""

from __future__ import annotations

import json
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import tensor as T
from .blocks import DREAM, PAM, GateConfig, soft_gates
from .nn import BatchNorm, Conv2d, Linear, Module, ModuleList, PReLU
from .tensor import ConvSpec, Tensor

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class BackboneConfig:
    stage_channels: tuple = (64, 128, 256, 512)
    blocks_per_stage: tuple = (3, 4, 14, 3)
    input_size: int = 112
    in_channels: int = 3
    embedding_dim: int = 512
    stem_stride: int = 1

    def __post_init__(self):
        object.__setattr__(self, "stage_channels", tuple(int(c) for c in self.stage_channels))
        object.__setattr__(self, "blocks_per_stage", tuple(int(b) for b in self.blocks_per_stage))
        if len(self.stage_channels) != 4 or len(self.blocks_per_stage) != 4:
            raise ValueError("BackboneConfig: exactly four stages are required")
        if min(self.stage_channels) < 1 or min(self.blocks_per_stage) < 1:
            raise ValueError("BackboneConfig: stage channels and block counts must be positive")
        if any(a > b for a, b in zip(self.stage_channels, self.stage_channels[1:])):
            raise ValueError("BackboneConfig: stage_channels must be nondecreasing")
        if self.stem_stride not in (1, 2):
            raise ValueError("BackboneConfig: stem_stride must be 1 or 2")
        if self.input_size < 1 or self.input_size % self.reduction:
            raise ValueError(
                f"BackboneConfig: input_size must be a positive multiple of {self.reduction}")
        if self.in_channels < 1 or self.embedding_dim < 1:
            raise ValueError("BackboneConfig: in_channels and embedding_dim must be positive")

    @property
    def reduction(self) -> int:
        """Total spatial downsampling from input to the last stage."""
        return 16 * self.stem_stride

    @classmethod
    def reference(cls) -> "BackboneConfig":
        return cls()

    @classmethod
    def toy(cls) -> "BackboneConfig":
        return cls(stage_channels=(16, 32, 64, 128), blocks_per_stage=(1, 1, 1, 1),
                   input_size=32, in_channels=3, embedding_dim=64, stem_stride=2)


_PLAN_RE = re.compile(r"PAM([1-4]+)")


@dataclass(frozen=True)
class PlacementPlan:
    stages_with_pam: frozenset = frozenset()

    def __post_init__(self):
        stages = frozenset(int(s) for s in self.stages_with_pam)
        if not stages <= {1, 2, 3, 4}:
            raise ValueError(f"PlacementPlan: stages must be within 1..4, got {sorted(stages)}")
        object.__setattr__(self, "stages_with_pam", stages)

    def render(self) -> str:
        if not self.stages_with_pam:
            return "baseline"
        return "PAM" + "".join(str(s) for s in sorted(self.stages_with_pam))

    def __str__(self) -> str:
        return self.render()


def parse_placement(s: str) -> PlacementPlan:
    """Parse ``"baseline"`` or ``"PAM"`` followed by distinct ascending stage digits."""
    if s == "baseline":
        return PlacementPlan()
    m = _PLAN_RE.fullmatch(s)
    if not m:
        raise ValueError(f"malformed placement {s!r}: expected 'baseline' or e.g. 'PAM12'")
    digits = [int(d) for d in m.group(1)]
    if any(b <= a for a, b in zip(digits, digits[1:])):
        raise ValueError(f"placement {s!r}: stage digits must be distinct and ascending")
    return PlacementPlan(frozenset(digits))


@dataclass(frozen=True)
class PamOptions:
    """Block design switches used by the ablations.

    ``gate`` is ``"soft"`` for the yaw coefficient or ``"one"`` for a
    constant gate of 1 on every sample.
    """

    conv: str = "depthwise"
    cam_variant: str = "cbam"
    identity_mapping: bool = False
    reduction: int = 16
    use_drm: bool = True
    use_cam: bool = True
    gate: str = "soft"
    k_slope: float = 10.0
    dream: bool = False

    def __post_init__(self):
        if self.conv not in ("depthwise", "dense"):
            raise ValueError(f"PamOptions.conv: unknown value {self.conv!r}")
        if self.cam_variant not in ("cbam", "se"):
            raise ValueError(f"PamOptions.cam_variant: unknown value {self.cam_variant!r}")
        if self.gate not in ("soft", "one"):
            raise ValueError(f"PamOptions.gate: unknown value {self.gate!r}")
        if not (self.use_drm or self.use_cam):
            raise ValueError("PamOptions: at least one of use_drm and use_cam must be set")


class IRBlock(Module):
    """Pre-activation residual unit: BN-conv3x3-PReLU-conv3x3(stride)-BN plus a shortcut."""

    def __init__(self, in_ch: int, out_ch: int, stride: int, rng, dtype):
        super().__init__()
        self.stride = stride
        self.bn1 = BatchNorm(in_ch, dtype=dtype)
        self.conv1 = Conv2d(ConvSpec(in_ch, out_ch, 3, 1, 1), rng, gain=np.sqrt(2), dtype=dtype)
        self.prelu = PReLU(out_ch, dtype=dtype)
        self.conv2 = Conv2d(ConvSpec(out_ch, out_ch, 3, stride, 1), rng, gain=np.sqrt(2), dtype=dtype)
        self.bn2 = BatchNorm(out_ch, dtype=dtype)
        if in_ch == out_ch:
            self.short_conv = None
        else:
            self.short_conv = Conv2d(ConvSpec(in_ch, out_ch, 1, stride, 0), rng, dtype=dtype)
            self.short_bn = BatchNorm(out_ch, dtype=dtype)

    def forward(self, x: Tensor) -> Tensor:
        if self.short_conv is None:
            sc = T.subsample(x, self.stride)
        else:
            sc = self.short_bn(self.short_conv(x))
        r = self.bn2(self.conv2(self.prelu(self.conv1(self.bn1(x)))))
        return T.add(r, sc)


class Model(Module):
    """Backbone producing (batch, embedding_dim) features, PAMs at selected stage ends."""

    def __init__(self, cfg: BackboneConfig, plan: PlacementPlan, options: PamOptions,
                 seed: int, initialize: bool = True, dtype=np.float64):
        super().__init__()
        self.cfg = cfg
        self.plan = plan
        self.options = options
        self.seed = seed
        self.dtype = np.dtype(dtype)
        self.gate_cfg = GateConfig(k_slope=options.k_slope)
        for s in sorted(plan.stages_with_pam):
            c = cfg.stage_channels[s - 1]
            if options.use_cam and c % options.reduction:
                raise ValueError(
                    f"stage {s} has {c} channels, not divisible by CAM reduction {options.reduction}")

        # independent streams keep trunk weights identical across placement plans
        streams = np.random.SeedSequence(seed).spawn(6)

        def rng(i):
            return np.random.default_rng(streams[i]) if initialize else None

        trunk = rng(0)
        c0 = cfg.stage_channels[0]
        self.stem_conv = Conv2d(ConvSpec(cfg.in_channels, c0, 3, cfg.stem_stride, 1), trunk,
                                gain=np.sqrt(2), dtype=dtype)
        self.stem_bn = BatchNorm(c0, dtype=dtype)
        self.stem_prelu = PReLU(c0, dtype=dtype)

        self.stages = ModuleList()
        in_ch = c0
        for out_ch, n_blocks in zip(cfg.stage_channels, cfg.blocks_per_stage):
            blocks = ModuleList()
            for b in range(n_blocks):
                blocks.append(IRBlock(in_ch, out_ch, 2 if b == 0 else 1, trunk, dtype))
                in_ch = out_ch
            self.stages.append(blocks)

        for s in sorted(plan.stages_with_pam):
            setattr(self, f"pam{s}", PAM(
                cfg.stage_channels[s - 1], rng(s), conv=options.conv,
                cam_variant=options.cam_variant, identity_mapping=options.identity_mapping,
                reduction=options.reduction, use_drm=options.use_drm, use_cam=options.use_cam,
                dtype=dtype))

        final_hw = cfg.input_size // cfg.reduction
        c4 = cfg.stage_channels[-1]
        self.head_bn = BatchNorm(c4, dtype=dtype)
        self.head_fc = Linear(c4 * final_hw * final_hw, cfg.embedding_dim, rng=trunk, dtype=dtype)
        self.head_bn_out = BatchNorm(cfg.embedding_dim, dtype=dtype)
        if options.dream:
            self.dream = DREAM(cfg.embedding_dim, rng(5), dtype=dtype)
        else:
            self.dream = None

    def pam(self, stage: int) -> Optional[PAM]:
        return getattr(self, f"pam{stage}", None)

    def gates(self, yaws) -> np.ndarray:
        g = soft_gates(yaws, self.gate_cfg)
        if self.options.gate == "one":
            g = np.ones_like(g)
        return g.astype(self.dtype)

    def forward(self, images: Tensor, yaws, gates=None) -> Tensor:
        cfg = self.cfg
        expected = (cfg.in_channels, cfg.input_size, cfg.input_size)
        if images.ndim != 4 or images.shape[1:] != expected:
            raise ValueError(f"images must have shape (batch, {expected}), got {images.shape}")
        g = self.gates(yaws) if gates is None else np.asarray(gates, dtype=self.dtype)
        if g.shape != (images.shape[0],):
            raise ValueError(f"{g.size} yaw values for a batch of {images.shape[0]}")

        x = self.stem_prelu(self.stem_bn(self.stem_conv(images)))
        for s, blocks in enumerate(self.stages, start=1):
            for blk in blocks:
                x = blk(x)
            pam = self.pam(s)
            if pam is not None:
                x = pam(x, g)
        x = self.head_bn(x)
        x = T.reshape(x, (x.shape[0], -1))
        e = self.head_bn_out(self.head_fc(x))
        if self.dream is not None:
            e = self.dream(e, g)
        return e

    def pam_parameters(self) -> list[tuple[str, Tensor]]:
        return [(n, p) for n, p in self.named_parameters() if n.startswith(("pam", "dream"))]


def build_model(cfg: BackboneConfig, plan: PlacementPlan, seed: int = 0,
                options: PamOptions = PamOptions(), initialize: bool = True,
                dtype=np.float64) -> Model:
    """Construct a model; equal arguments give bitwise-identical parameters.

    With ``initialize=False`` every weight is zero, which is enough for
    parameter accounting and avoids drawing random numbers.
    """
    return Model(cfg, plan, options, seed, initialize=initialize, dtype=dtype)


def forward_extract(model: Model, images, yaws, mode: str = "eval", gates=None) -> Tensor:
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    model.train(mode == "train")
    if not isinstance(images, Tensor):
        images = Tensor(np.asarray(images, dtype=model.dtype))
    return model(images, yaws, gates=gates)


# ---------------------------------------------------------------------------
# checkpoints
#
# A checkpoint is an uncompressed .npz archive. Every array is stored
# little-endian. Entries:
#   param/<name>   trainable arrays in model order
#   buffer/<name>  batch-norm running statistics
#   __meta__       uint8 bytes of a UTF-8 JSON object with keys
#                  format_version, dtype, backbone, placement, options, seed, extra


class CheckpointError(RuntimeError):
    pass


def _le(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<"))


def model_meta(model: Model) -> dict:
    return {
        "format_version": CHECKPOINT_VERSION,
        "dtype": model.dtype.name,
        "backbone": asdict(model.cfg),
        "placement": model.plan.render(),
        "options": asdict(model.options),
        "seed": model.seed,
    }


def save_checkpoint(model: Model, path, extra: Optional[dict] = None) -> None:
    meta = model_meta(model)
    meta["extra"] = extra or {}
    arrays = {f"param/{n}": _le(p.data) for n, p in model.named_parameters()}
    arrays.update({f"buffer/{n}": _le(b) for n, b in model.named_buffers()})
    arrays["__meta__"] = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def read_checkpoint_meta(path) -> dict:
    with np.load(path, allow_pickle=False) as z:
        return json.loads(bytes(z["__meta__"]).decode())


def load_checkpoint(path) -> tuple[Model, dict]:
    """Rebuild the model recorded in ``path``; returns ``(model, meta)``."""
    try:
        z = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with z:
        if "__meta__" not in z.files:
            raise CheckpointError(f"{path}: missing __meta__ entry")
        meta = json.loads(bytes(z["__meta__"]).decode())
        version = meta.get("format_version")
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(
                f"{path}: checkpoint format version {version}, expected {CHECKPOINT_VERSION}")
        cfg = BackboneConfig(**meta["backbone"])
        model = build_model(cfg, parse_placement(meta["placement"]), meta["seed"],
                            PamOptions(**meta["options"]), initialize=False,
                            dtype=np.dtype(meta["dtype"]))
        for n, p in model.named_parameters():
            arr = z[f"param/{n}"]
            if arr.shape != p.shape:
                raise CheckpointError(f"{path}: {n} has shape {arr.shape}, model expects {p.shape}")
            p.data[...] = arr
        for n, b in model.named_buffers():
            b[...] = z[f"buffer/{n}"]
    return model, meta
