import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from pam.accounting import count_params
from pam.blocks import (CAM, DREAM, DRM, PAM, GateConfig, cam_forward, cam_param_count, dream_param_count,
                        drm_param_count, pam_forward, pam_param_count, soft_gate, soft_gates)
from pam.tensor import Tensor

CHANNELS_16 = list(range(16, 513, 16))


def _gate_ref(y, k=10.0):
    return 1.0 / (1.0 + math.exp(-k * (abs(y) / 45.0 - 1.0)))


def _perturbed_pam(c, seed, **kw):
    rng = np.random.default_rng(seed)
    pam = PAM(c, rng, **kw)
    for name, p in pam.named_parameters():
        if name.endswith("gamma"):
            p.data[...] = rng.uniform(0.5, 1.5, size=p.shape)
        elif name.endswith("beta"):
            p.data[...] = rng.normal(size=p.shape)
    return pam, rng


class TestGate:
    def test_reference_values(self):
        assert soft_gate(45) == 0.5
        assert soft_gate(90) == pytest.approx(0.9999546021312976, abs=1e-12)
        assert soft_gate(0) == pytest.approx(4.5397868702434395e-05, abs=1e-15)

    def test_closed_form_and_evenness_on_grid(self):
        ys = np.round(np.arange(-900, 901) * 0.1, 10)
        vals = soft_gates(ys)
        ref = np.array([_gate_ref(y) for y in ys])
        np.testing.assert_allclose(vals, ref, atol=1e-12, rtol=0)
        np.testing.assert_array_equal(vals, vals[::-1])

    def test_scalar_and_vector_agree(self):
        ys = np.array([-80.0, -3.5, 0.0, 17.0, 60.0])
        np.testing.assert_allclose(soft_gates(ys), [soft_gate(y) for y in ys], rtol=0, atol=1e-15)

    @pytest.mark.parametrize("bad", [90.5, -91.0, float("nan"), float("inf")])
    def test_rejects_out_of_range(self, bad):
        with pytest.raises(ValueError):
            soft_gate(bad)

    def test_slope_changes_sharpness(self):
        soft, sharp = GateConfig(k_slope=2.0), GateConfig(k_slope=40.0)
        assert soft_gate(30, sharp) < soft_gate(30, soft)
        assert soft_gate(60, sharp) > soft_gate(60, soft)

    def test_bad_config(self):
        with pytest.raises(ValueError):
            GateConfig(k_slope=0.0)


class TestParameterCounts:
    @pytest.mark.parametrize("c", CHANNELS_16)
    def test_constructed_counts_match_closed_forms(self, c):
        assert count_params(DRM(c)) == drm_param_count(c) == 23 * c
        assert count_params(CAM(c)) == cam_param_count(c) == c * c // 8
        assert count_params(PAM(c)) == pam_param_count(c) == 23 * c + c * c // 8
        assert count_params(DRM(c, conv="dense")) == drm_param_count(c, "dense") == 18 * c * c + 5 * c

    def test_se_and_cbam_share_the_mlp(self):
        assert count_params(CAM(64, variant="se")) == count_params(CAM(64, variant="cbam"))

    def test_dream(self):
        assert count_params(DREAM(512)) == dream_param_count(512) == 525_312

    def test_cam_rejects_indivisible_channels(self):
        with pytest.raises(ValueError):
            CAM(24, reduction=16)


class TestStructure:
    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10 ** 6), variant=st.sampled_from(["cbam", "se"]))
    def test_zero_gate_reduces_pam_to_cam(self, seed, variant):
        pam, rng = _perturbed_pam(32, seed, cam_variant=variant)
        pam.train()
        x = Tensor(rng.normal(size=(3, 32, 5, 5)))
        np.testing.assert_array_equal(pam(x, np.zeros(3)).data, pam.cam(x).data)

    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10 ** 6))
    def test_cam_without_identity_is_bounded_by_input(self, seed):
        rng = np.random.default_rng(seed)
        cam = CAM(16, rng)
        x = rng.normal(scale=3.0, size=(2, 16, 4, 4))
        y = cam(Tensor(x)).data
        assert np.all(np.abs(y) <= np.abs(x))
        assert np.all(np.sign(y) * np.sign(x) >= 0)

    def test_identity_mapping_adds_input(self):
        rng = np.random.default_rng(0)
        plain = CAM(16, np.random.default_rng(1))
        ident = CAM(16, np.random.default_rng(1), identity_mapping=True)
        x = Tensor(rng.normal(size=(2, 16, 3, 3)))
        np.testing.assert_allclose(ident(x).data, x.data + plain(x).data, atol=1e-15)

    def test_gate_scales_the_residual(self):
        pam, rng = _perturbed_pam(16, 3)
        drm = pam.drm
        x = Tensor(rng.normal(size=(2, 16, 4, 4)))
        gate = np.array([0.25, 1.0])
        res = drm.residual(x).data
        np.testing.assert_allclose(drm(x, gate).data, x.data + gate[:, None, None, None] * res, atol=1e-14)

    def test_functional_forms_match_modules(self):
        pam, rng = _perturbed_pam(16, 4)
        x = Tensor(rng.normal(size=(2, 16, 3, 3)))
        g = np.array([0.1, 0.9])
        np.testing.assert_array_equal(pam_forward(x, pam.drm, pam.cam, g).data, pam(x, g).data)
        np.testing.assert_array_equal(cam_forward(x, pam.cam).data, pam.cam(x).data)

    def test_dream_zero_gate_is_identity(self):
        rng = np.random.default_rng(0)
        d = DREAM(8, rng)
        e = Tensor(rng.normal(size=(3, 8)))
        np.testing.assert_array_equal(d(e, np.zeros(3)).data, e.data)

    def test_channel_mismatch_rejected(self):
        with pytest.raises(ValueError):
            DRM(16)(Tensor(np.zeros((1, 8, 2, 2))), np.ones(1))

    def test_pam_needs_a_half(self):
        with pytest.raises(ValueError):
            PAM(16, use_drm=False, use_cam=False)
