"""Gate ablation on the toy profile: no PAM, PAM with the yaw gate, PAM with gate 1."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from ..backbone import BackboneConfig, PamOptions, PlacementPlan, build_model, parse_placement
from .data import CorruptionParams, generate_dataset
from .evaluate import make_pairs
from .train import TrainConfig, train

log = logging.getLogger(__name__)

VARIANTS = ("baseline", "soft", "one")
HIGH_YAW = "acc_y60_90"


@dataclass(frozen=True)
class AblationConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig.toy)
    plan: str = "PAM12"
    train: TrainConfig = field(default_factory=TrainConfig)
    corruption: CorruptionParams = field(default_factory=CorruptionParams)
    n_identities: int = 20
    n_per_identity: int = 50
    eval_identities: int = 60
    eval_per_identity: int = 10
    dtype: str = "float32"


@dataclass
class AblationResult:
    scores: dict  # variant -> list of high-yaw accuracies, one per seed
    histories: dict  # (variant, seed) -> history

    def mean(self, v: str) -> float:
        return float(np.mean(self.scores[v]))

    def std(self, v: str) -> float:
        """Population standard deviation across seeds."""
        return float(np.std(self.scores[v]))


def variant_model(variant: str, cfg: AblationConfig, seed: int):
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}")
    plan = PlacementPlan() if variant == "baseline" else parse_placement(cfg.plan)
    opts = PamOptions(gate="one" if variant == "one" else "soft")
    return build_model(cfg.backbone, plan, seed, opts, dtype=np.dtype(cfg.dtype))


def run_ablation(seeds: Sequence[int], cfg: AblationConfig = AblationConfig(),
                 variants: Sequence[str] = VARIANTS) -> AblationResult:
    """Train every variant on every seed and score the high-yaw bucket.

    Seed ``s`` fixes the training identities (data seed ``1000 + s``), a
    disjoint evaluation population (``5000 + s``), the pairs and the model
    initialization, so variants at one seed differ only in the PAM design.
    """
    scores, histories = {v: [] for v in variants}, {}
    size, ch = cfg.backbone.input_size, cfg.backbone.in_channels
    for s in seeds:
        tr = generate_dataset(1000 + s, cfg.n_identities, cfg.n_per_identity, "frontal-skewed",
                              size, ch, cfg.corruption)
        ev = generate_dataset(5000 + s, cfg.eval_identities, cfg.eval_per_identity, "uniform",
                              size, ch, cfg.corruption)
        pairs = make_pairs(ev, s)
        tcfg = replace(cfg.train, seed=s)
        for v in variants:
            res = train(variant_model(v, cfg, s), tr, tcfg, ev, pairs)
            histories[(v, s)] = res.history
            scores[v].append(res.history[-1][HIGH_YAW])
            log.info("seed %d %s high-yaw %.4f", s, v, scores[v][-1])
    return AblationResult(scores, histories)


def ordering_holds(res: AblationResult) -> tuple[bool, str]:
    """Check soft >= one >= baseline on mean high-yaw accuracy, and that soft
    beats baseline by more than the larger across-seed std of the two."""
    m = {v: res.mean(v) for v in VARIANTS}
    spread = max(res.std("soft"), res.std("baseline"))
    ok = m["soft"] >= m["one"] >= m["baseline"] and m["soft"] - m["baseline"] > spread
    text = (f"soft {m['soft']:.4f}±{res.std('soft'):.4f}  one {m['one']:.4f}±{res.std('one'):.4f}  "
            f"baseline {m['baseline']:.4f}±{res.std('baseline'):.4f}  margin {m['soft'] - m['baseline']:.4f} "
            f"vs spread {spread:.4f}")
    return ok, text
