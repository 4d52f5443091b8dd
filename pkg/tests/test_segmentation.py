"""Similarity features, the segmentation head, and image-level scoring."""

import numpy as np
import pytest
import torch

from pfadseg.blocks import AFF, PCAR, RCM
from pfadseg.losses import seg_loss
from pfadseg.pyramid import FeaturePyramid
from pfadseg.segmentation import (
    SEG_WIDTHS,
    SegmentationHead,
    build_seg_input,
    cosine_similarity_map,
    image_score,
)


def _pyramid(batch=2, channels=(4, 8, 16), size=8, seed=0):
    g = torch.Generator().manual_seed(seed)
    return FeaturePyramid(
        torch.randn(batch, channels[0], size, size, generator=g),
        torch.randn(batch, channels[1], size // 2, size // 2, generator=g),
        torch.randn(batch, channels[2], size // 4, size // 4, generator=g),
    )


class TestCosineSimilarityMap:
    def test_channel_sum_is_cosine(self):
        g = torch.Generator().manual_seed(1)
        ft = torch.randn(2, 6, 5, 5, generator=g)
        fs = torch.randn(2, 6, 5, 5, generator=g)
        sims = cosine_similarity_map(ft, fs).sum(dim=1)
        expected = torch.nn.functional.cosine_similarity(ft, fs, dim=1)
        assert torch.allclose(sims, expected, atol=1e-5)
        assert float(sims.abs().max()) <= 1.0 + 1e-6

    def test_identical_vectors(self):
        ft = torch.rand(1, 4, 3, 3) + 0.5
        total = cosine_similarity_map(ft, ft).sum(dim=1)
        assert torch.allclose(total, torch.ones_like(total), atol=1e-5)

    def test_antipodal_vectors(self):
        ft = torch.rand(1, 4, 3, 3) + 0.5
        total = cosine_similarity_map(ft, -ft).sum(dim=1)
        assert torch.allclose(total, -torch.ones_like(total), atol=1e-5)

    def test_zero_vector_gives_zero(self):
        ft = torch.zeros(1, 4, 2, 2)
        fs = torch.rand(1, 4, 2, 2)
        assert torch.equal(cosine_similarity_map(ft, fs), torch.zeros(1, 4, 2, 2))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            cosine_similarity_map(torch.zeros(1, 4, 2, 2), torch.zeros(1, 5, 2, 2))


class TestBuildSegInput:
    def test_shapes(self):
        x = build_seg_input(_pyramid(seed=0), _pyramid(seed=1))
        assert x.shape == (2, 4 + 8 + 16, 8, 8)

    def test_full_width_channel_count(self):
        a = _pyramid(batch=1, channels=(64, 128, 256), size=8, seed=2)
        b = _pyramid(batch=1, channels=(64, 128, 256), size=8, seed=3)
        assert build_seg_input(a, b).shape == (1, 448, 8, 8)

    def test_level_one_passes_through_unscaled(self):
        a, b = _pyramid(seed=4), _pyramid(seed=5)
        x = build_seg_input(a, b)
        assert torch.equal(x[:, :4], cosine_similarity_map(a.level1, b.level1))

    def test_pyramid_mismatch(self):
        a = _pyramid(seed=0)
        b = FeaturePyramid(a.level1, torch.zeros(2, 9, 4, 4), a.level3)
        with pytest.raises(ValueError, match="level 2"):
            build_seg_input(a, b)


class TestSegmentationHead:
    def test_output_shape_and_range(self):
        head = SegmentationHead(28, channel_scale=0.25).eval()
        with torch.no_grad():
            out = head(torch.randn(2, 28, 16, 16))
        assert out.shape == (2, 16, 16)
        assert float(out.min()) >= 0.0 and float(out.max()) <= 1.0

    def test_widths(self):
        head = SegmentationHead(448)
        assert head.block1.config.out_channels == SEG_WIDTHS[0] == 128
        assert head.block2.config.out_channels == SEG_WIDTHS[1] == 64
        assert head.head.in_channels == 64 and head.head.out_channels == 1
        scaled = SegmentationHead(112, channel_scale=0.25)
        assert scaled.block1.config.out_channels == 32
        assert scaled.block2.config.out_channels == 16

    def test_rcm_flag(self):
        assert isinstance(SegmentationHead(16, channel_scale=0.1).rcm, RCM)
        assert SegmentationHead(16, use_rcm=False, channel_scale=0.1).rcm is None

    def test_block_flags(self):
        full = SegmentationHead(16, channel_scale=0.1)
        assert any(isinstance(m, AFF) for m in full.modules())
        assert any(isinstance(m, PCAR) for m in full.modules())
        bare = SegmentationHead(16, use_aff=False, use_pcar=False, channel_scale=0.1)
        assert not any(isinstance(m, AFF) for m in bare.modules())
        assert not any(isinstance(m, PCAR) for m in bare.modules())


class TestSegHeadGradients:
    def test_seg_loss_gradient_at_full_width(self):
        """Analytic vs central-difference gradients on the 448-channel head.

        Checking every slot is far too slow at this width, so a fixed random
        sample of input and parameter coordinates is verified instead.
        """
        step, tol = 1e-6, 1e-3
        torch.manual_seed(0)
        head = SegmentationHead(448).double().eval()
        x = (torch.rand(1, 448, 8, 8, dtype=torch.float64) - 0.5).requires_grad_(True)
        mask = (torch.rand(1, 8, 8) > 0.5).double()

        def loss_value():
            return seg_loss(head(x), mask)

        loss = loss_value()
        params = [("input", x)] + [(n, p) for n, p in head.named_parameters()]
        loss.backward()

        rng = np.random.default_rng(0)
        failures = []
        checks = 0
        for name, tensor in params:
            flat = tensor.detach().reshape(-1)
            grad = tensor.grad.reshape(-1)
            n_slots = 8 if name == "input" else max(1, min(2, flat.numel()))
            for slot in rng.choice(flat.numel(), size=n_slots, replace=False):
                slot = int(slot)
                orig = float(flat[slot])
                with torch.no_grad():
                    flat[slot] = orig + step
                    hi = float(loss_value())
                    flat[slot] = orig - step
                    lo = float(loss_value())
                    flat[slot] = orig
                numeric = (hi - lo) / (2 * step)
                analytic = float(grad[slot])
                denom = max(abs(analytic), abs(numeric), 1e-4)
                if abs(analytic - numeric) / denom > tol:
                    failures.append((name, slot, analytic, numeric))
                checks += 1
        assert checks >= 40
        assert not failures, f"gradient mismatches: {failures[:5]}"


class TestImageScore:
    def test_topk_mean(self):
        prob = np.zeros((20, 20))
        prob.ravel()[:50] = 1.0
        assert image_score(prob, top_k=100) == pytest.approx(0.5)

    def test_k_one_is_max(self):
        prob = np.random.default_rng(0).random((10, 10))
        assert image_score(prob, top_k=1) == pytest.approx(float(prob.max()))

    def test_k_clamps_to_pixel_count(self):
        prob = np.random.default_rng(1).random((4, 4))
        assert image_score(prob, top_k=10_000) == pytest.approx(float(prob.mean()))

    def test_monotone_under_shift(self):
        prob = np.random.default_rng(2).random((16, 16))
        assert image_score(prob + 0.1) > image_score(prob)

    def test_rejects_bad_k(self):
        with pytest.raises(ValueError, match="top_k"):
            image_score(np.zeros((4, 4)), top_k=0)
