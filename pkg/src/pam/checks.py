"""Finite-difference gradient checks for every primitive, block and the loss.

Each check builds random double-precision inputs from a seed and returns
``{group: max relative error}``; groups are the input tensors or parameter
sets of the checked function.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

from . import tensor as T
from .blocks import CAM, DREAM, DRM, PAM
from .gradcheck import grad_check
from .harness.loss import margin_loss
from .tensor import BatchNormState, ConvSpec, Tensor

TOLERANCE = 1e-5
STEP = 1e-5


def _t(rng, *shape, scale=1.0) -> Tensor:
    return Tensor(rng.normal(scale=scale, size=shape), requires_grad=True)


def _check(fn, groups: dict, rng) -> dict:
    names = list(groups)
    tensors = [groups[n] for n in names]
    # random output weights so every output coordinate is checked separately
    proj = np.random.default_rng(rng.integers(2 ** 32))
    probe = fn()
    w = Tensor(proj.normal(size=probe.shape)) if probe.data.size > 1 else None

    def f():
        y = fn()
        return T.sum_all(T.mul(y, w)) if w is not None else y

    errs = grad_check(f, tensors, step=STEP, per_input=True)
    return dict(zip(names, errs))


def _module_check(module, x: Tensor, call: Callable, rng) -> dict:
    groups = {"input": x}
    for name, p in module.named_parameters():
        groups[name] = p
    return _check(call, groups, rng)


# ---------------------------------------------------------------------------
# primitives


def check_conv2d(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
    spec = ConvSpec(c_in, c_out, 3, stride, pad, has_bias=True)
    x, w, b = _t(rng, 2, c_in, 5, 5), _t(rng, *spec.weight_shape), _t(rng, c_out)
    return _check(lambda: T.conv2d(x, w, b, spec), {"x": x, "weights": w, "bias": b}, rng)


def check_depthwise(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 5))
    spec = ConvSpec(c, c, 3, 1, 1, groups=c)
    x, w = _t(rng, 2, c, 5, 4), _t(rng, *spec.weight_shape)
    return _check(lambda: T.conv2d(x, w, None, spec), {"x": x, "weights": w}, rng)


def check_grouped(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    spec = ConvSpec(4, 6, 3, 2, 1, groups=2)
    x, w = _t(rng, 2, 4, 5, 5), _t(rng, *spec.weight_shape)
    return _check(lambda: T.conv2d(x, w, None, spec), {"x": x, "weights": w}, rng)


def check_batch_norm(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    c = int(rng.integers(1, 4))
    state = BatchNormState.create(c)
    state.gamma.data[...] = rng.normal(size=c)
    state.beta.data[...] = rng.normal(size=c)
    x = _t(rng, 3, c, 3, 2, scale=2.0)
    out = _check(lambda: T.batch_norm(x, state), {"x": x, "gamma": state.gamma, "beta": state.beta}, rng)
    state.mode = "eval"
    state.running_var[...] = rng.uniform(0.5, 2.0, size=c)
    ev = _check(lambda: T.batch_norm(x, state), {"x": x, "gamma": state.gamma, "beta": state.beta}, rng)
    out.update({f"eval.{k}": v for k, v in ev.items()})
    return out


def check_prelu(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    x, a = _t(rng, 2, 3, 4, 4), _t(rng, 3, scale=0.3)
    return _check(lambda: T.prelu(x, a), {"x": x, "slopes": a}, rng)


def check_global_pool(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    x = _t(rng, 2, 3, 4, 3)
    out = {"avg.x": _check(lambda: T.global_pool(x, "avg"), {"x": x}, rng)["x"]}
    out["max.x"] = _check(lambda: T.global_pool(x, "max"), {"x": x}, rng)["x"]
    return out


def check_affine(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    x, w, b = _t(rng, 3, 5), _t(rng, 4, 5), _t(rng, 4)
    return _check(lambda: T.affine(x, w, b), {"x": x, "W": w, "b": b}, rng)


def check_elementwise(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    x, y = _t(rng, 2, 3, 2, 2), _t(rng, 2, 3, 2, 2)
    s = rng.uniform(0.1, 1.0, size=2)
    a = _t(rng, 2, 3)
    out = {}
    out.update({f"add.{k}": v for k, v in _check(lambda: T.add(x, y), {"x": x, "y": y}, rng).items()})
    out.update({f"mul.{k}": v for k, v in _check(lambda: T.mul(x, y), {"x": x, "y": y}, rng).items()})
    out["scale_per_sample.x"] = _check(lambda: T.scale_per_sample(x, s), {"x": x}, rng)["x"]
    out.update({f"scale_channels.{k}": v for k, v in
                _check(lambda: T.scale_channels(x, a), {"x": x, "a": a}, rng).items()})
    return out


def check_sigmoid(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    x = _t(rng, 3, 4, scale=2.0)
    out = {"sigmoid.x": _check(lambda: T.sigmoid(x), {"x": x}, rng)["x"]}
    out["relu.x"] = _check(lambda: T.relu(x), {"x": x}, rng)["x"]
    return out


def check_l2_normalize(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    x = _t(rng, 3, 5)
    return _check(lambda: T.l2_normalize(x), {"x": x}, rng)


def check_cross_entropy(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    z = _t(rng, 4, 5, scale=3.0)
    labels = rng.integers(0, 5, size=4)
    return _check(lambda: T.cross_entropy(z, labels), {"logits": z}, rng)


# ---------------------------------------------------------------------------
# blocks


def _perturb_bn(module, rng) -> None:
    for name, p in module.named_parameters():
        if name.endswith(("gamma", "beta")):
            p.data[...] = rng.normal(scale=0.5, size=p.shape) + (1.0 if name.endswith("gamma") else 0.0)


def check_drm(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    drm = DRM(8, rng)
    _perturb_bn(drm, rng)
    x = _t(rng, 2, 8, 5, 5)
    gate = rng.uniform(0.0, 1.0, size=2)
    return _module_check(drm, x, lambda: drm(x, gate), rng)


def check_cam(seed: int, variant: str = "cbam", identity_mapping: bool = False) -> dict:
    rng = np.random.default_rng(seed)
    cam = CAM(16, rng, variant=variant, identity_mapping=identity_mapping, reduction=16)
    x = _t(rng, 2, 16, 4, 4)
    return _module_check(cam, x, lambda: cam(x), rng)


def check_pam(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    pam = PAM(16, rng)
    _perturb_bn(pam, rng)
    x = _t(rng, 2, 16, 6, 6)
    gate = rng.uniform(0.0, 1.0, size=2)
    return _module_check(pam, x, lambda: pam(x, gate), rng)


def check_dream(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    dream = DREAM(12, rng)
    for p in dream.parameters():
        p.data[...] = rng.normal(scale=0.5, size=p.shape)
    e = _t(rng, 3, 12)
    gate = rng.uniform(0.0, 1.0, size=3)
    return _module_check(dream, e, lambda: dream(e, gate), rng)


def check_margin_loss(seed: int) -> dict:
    rng = np.random.default_rng(seed)
    e, w = _t(rng, 4, 6), _t(rng, 5, 6)
    labels = rng.integers(0, 5, size=4)
    fn = lambda: margin_loss(T.l2_normalize(e), labels, T.l2_normalize(w), s=64.0, m=0.5)
    return _check(fn, {"embeddings": e, "class_weights": w}, rng)


PRIMITIVES = {
    "conv2d": check_conv2d,
    "depthwise": check_depthwise,
    "grouped": check_grouped,
    "batch_norm": check_batch_norm,
    "prelu": check_prelu,
    "global_pool": check_global_pool,
    "affine": check_affine,
    "elementwise": check_elementwise,
    "sigmoid": check_sigmoid,
    "l2_normalize": check_l2_normalize,
    "cross_entropy": check_cross_entropy,
}

BLOCKS = {
    "drm": check_drm,
    "cam-cbam": lambda s: check_cam(s, "cbam", False),
    "cam-cbam-identity": lambda s: check_cam(s, "cbam", True),
    "cam-se": lambda s: check_cam(s, "se", False),
    "cam-se-identity": lambda s: check_cam(s, "se", True),
    "pam": check_pam,
    "dream": check_dream,
}

LOSSES = {"margin_loss": check_margin_loss}

GROUPS = {"primitive": PRIMITIVES, "block": BLOCKS, "loss": LOSSES}


def resolve(target: str) -> dict:
    """Map a target name (a check, a group, or ``all``) to ``{name: check}``."""
    if target == "all":
        return {**PRIMITIVES, **BLOCKS, **LOSSES}
    if target in GROUPS:
        return dict(GROUPS[target])
    if target == "cam":
        return {k: v for k, v in BLOCKS.items() if k.startswith("cam")}
    for table in GROUPS.values():
        if target in table:
            return {target: table[target]}
    raise KeyError(target)


def run(target: str, seeds) -> dict:
    """``{check: {group: max error over seeds}}`` for every check in ``target``."""
    results = {}
    for name, fn in resolve(target).items():
        agg: dict = {}
        for s in seeds:
            for group, err in fn(s).items():
                agg[group] = max(agg.get(group, 0.0), err)
        results[name] = agg
    return results
