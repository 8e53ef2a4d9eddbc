"""Charbonnier loss, local contrast, CPBD sharpness, reference metrics."""

import math

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from bsonet.imagecore import (BarGroup, Image, SceneSpec, ValidationError,
                              generate_phantom)
from bsonet.metrics import (LossConfig, MetricsRecord, MetricsReport,
                            charbonnier_loss, compute_record, cpbd,
                            load_reports, local_contrast, mse, psnr,
                            save_reports, summary_table)
from conftest import random_image


class TestCharbonnier:
    def test_identical_inputs_give_exactly_epsilon(self, rng):
        x = torch.from_numpy(rng.uniform(0, 1, size=(33, 47)))
        mask = torch.from_numpy(rng.random((33, 47)) < 0.1)
        loss = charbonnier_loss(x, x, mask)
        assert float(loss) == 1e-3
        full = charbonnier_loss(x, x, cfg=LossConfig(reduction="full_mean"))
        assert float(full) == 1e-3

    @given(st.floats(-2.0, 2.0), st.floats(-2.0, 2.0))
    def test_single_pixel_closed_form(self, p, t):
        loss = charbonnier_loss(torch.tensor([[p]], dtype=torch.float64),
                                torch.tensor([[t]], dtype=torch.float64),
                                torch.tensor([[True]]))
        assert float(loss) == pytest.approx(math.sqrt((p - t) ** 2 + 1e-6),
                                            abs=1e-12)

    @given(st.integers(0, 10_000))
    def test_symmetry(self, seed):
        rng = np.random.default_rng(seed)
        a = torch.from_numpy(rng.uniform(0, 1, size=(8, 8)))
        b = torch.from_numpy(rng.uniform(0, 1, size=(8, 8)))
        m = torch.from_numpy(rng.random((8, 8)) < 0.3)
        if not bool(m.any()):
            m[0, 0] = True
        assert float(charbonnier_loss(a, b, m)) == float(charbonnier_loss(b, a, m))

    def test_monotone_in_abs_difference(self):
        t = torch.zeros(1, 1, dtype=torch.float64)
        m = torch.ones(1, 1, dtype=torch.bool)
        values = [float(charbonnier_loss(
            torch.full((1, 1), d, dtype=torch.float64), t, m))
            for d in (0.0, 0.01, 0.1, 0.5, 1.0)]
        assert values == sorted(values)
        assert values[0] == 1e-3

    def test_masked_mean_uses_only_masked_pixels(self):
        pred = torch.tensor([[0.0, 5.0], [0.0, 0.0]], dtype=torch.float64)
        target = torch.zeros(2, 2, dtype=torch.float64)
        mask = torch.tensor([[True, False], [True, False]])
        loss = float(charbonnier_loss(pred, target, mask))
        assert loss == 1e-3  # the 5.0 error sits outside the mask

    def test_validation(self):
        x = torch.zeros(2, 2)
        with pytest.raises(ValidationError, match="shape mismatch"):
            charbonnier_loss(x, torch.zeros(3, 2), torch.ones(2, 2, dtype=torch.bool))
        with pytest.raises(ValidationError, match="requires a mask"):
            charbonnier_loss(x, x)
        with pytest.raises(ValidationError, match="empty mask"):
            charbonnier_loss(x, x, torch.zeros(2, 2, dtype=torch.bool))
        with pytest.raises(ValidationError):
            LossConfig(epsilon=0.0)
        with pytest.raises(ValidationError):
            LossConfig(reduction="sum")

    def test_gradient_flows(self):
        pred = torch.tensor([[0.3, 0.7]], requires_grad=True)
        loss = charbonnier_loss(pred, torch.zeros(1, 2),
                                torch.ones(1, 2, dtype=torch.bool))
        loss.backward()
        assert torch.all(torch.isfinite(pred.grad))


def _local_contrast_oracle(x: np.ndarray) -> float:
    """Naive double loop over pixels and their in-bounds 8-neighbors."""
    m, n = x.shape
    num = 0.0
    for i in range(m):
        for j in range(n):
            for di in (-1, 0, 1):
                for dj in (-1, 0, 1):
                    if di == 0 and dj == 0:
                        continue
                    k, l = i + di, j + dj
                    if 0 <= k < m and 0 <= l < n:
                        num += (x[i, j] - x[k, l]) ** 2
    den = 8 * (m - 2) * (n - 2) + 5 * (2 * (m - 2) + 2 * (n - 2)) + 3 * 4
    return math.sqrt(num / den)


class TestLocalContrast:
    def test_constant_is_zero(self):
        assert local_contrast(Image.filled(16, 16, 123.0)) == 0.0

    def test_checkerboard_2x2(self):
        value = local_contrast(np.array([[0.0, 1.0], [1.0, 0.0]]))
        assert value == pytest.approx(math.sqrt(8.0 / 12.0), abs=1e-9)

    def test_center_spike_3x3(self):
        x = np.zeros((3, 3))
        x[1, 1] = 1.0
        assert local_contrast(x) == pytest.approx(math.sqrt(16.0 / 40.0), abs=1e-9)

    def test_matches_double_loop_oracle(self, rng):
        for _ in range(20):
            x = rng.uniform(0, 65535, size=(16, 16))
            assert local_contrast(x) == pytest.approx(
                _local_contrast_oracle(x), abs=1e-9)

    @given(st.integers(2, 7), st.integers(2, 7), st.integers(0, 10_000))
    def test_oracle_property_any_shape(self, m, n, seed):
        x = np.random.default_rng(seed).uniform(0, 100, size=(m, n))
        assert local_contrast(x) == pytest.approx(_local_contrast_oracle(x),
                                                  rel=1e-12, abs=1e-9)

    def test_denominator_counts_ordered_pairs(self):
        for m, n in ((2, 2), (3, 5), (4, 4), (7, 2)):
            count = 0
            for i in range(m):
                for j in range(n):
                    for di in (-1, 0, 1):
                        for dj in (-1, 0, 1):
                            if (di or dj) and 0 <= i + di < m and 0 <= j + dj < n:
                                count += 1
            den = 8 * (m - 2) * (n - 2) + 5 * (2 * (m - 2) + 2 * (n - 2)) + 3 * 4
            assert den == count

    def test_noise_increases_contrast_on_constant(self, rng):
        base = np.full((32, 32), 1000.0)
        for _ in range(20):
            noisy = base + rng.normal(0, 50, size=base.shape)
            assert local_contrast(noisy) > local_contrast(base)

    def test_too_small_rejected(self):
        with pytest.raises(ValidationError):
            local_contrast(np.zeros((1, 5)))


def _bar_phantom(seed: int) -> Image:
    rng = np.random.default_rng(seed)
    bw = int(rng.integers(2, 5))
    return generate_phantom(SceneSpec(96, 96, 2000.0, (
        BarGroup(origin=(int(rng.integers(4, 40)), int(rng.integers(4, 30))),
                 bar_width_px=bw, gap_px=int(rng.integers(2, 5)),
                 count=int(rng.integers(2, 5)),
                 intensity=float(rng.integers(20000, 50000))),)))


class TestCpbd:
    def test_constant_image_convention(self):
        score, no_edges = cpbd(Image.filled(64, 64, 5000.0))
        assert score == 1.0 and no_edges is True

    def test_score_in_unit_interval(self, rng):
        for seed in range(10):
            img = _bar_phantom(seed)
            score, flag = cpbd(img)
            assert 0.0 <= score <= 1.0

    def test_sharp_scores_above_blurred(self):
        from scipy import ndimage
        img = _bar_phantom(3)
        blurred = Image(ndimage.gaussian_filter(img.pixels, sigma=2.0,
                                                mode="nearest"))
        s_sharp, f1 = cpbd(img)
        s_blur, f2 = cpbd(blurred)
        assert not f1 and not f2
        assert s_sharp > s_blur

    def test_invariant_under_global_offset(self):
        img = _bar_phantom(7)
        shifted = Image(img.pixels + 1000.0)
        assert cpbd(img) == cpbd(shifted)

    def test_too_small_rejected(self):
        with pytest.raises(ValidationError):
            cpbd(Image.filled(63, 64, 0.0))


class TestReferenceMetrics:
    def test_identical_images(self):
        img = Image.filled(8, 8, 100.0)
        assert mse(img, img) == 0.0
        assert psnr(img, img) == math.inf

    def test_known_values(self):
        a = Image.filled(16, 16, 1100.0)
        b = Image.filled(16, 16, 1000.0)
        assert mse(a, b) == 10000.0
        assert psnr(a, b) == pytest.approx(10 * math.log10(65535.0 ** 2 / 10000.0))

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            mse(Image.filled(4, 4, 0.0), Image.filled(4, 5, 0.0))


class TestReport:
    def _report(self, rng, with_ref: bool, method: str = "identity") -> MetricsReport:
        records = []
        for i in range(3):
            img = random_image(rng, 64, 64, low=1000, high=4000)
            ref = Image.filled(64, 64, 2000.0) if with_ref else None
            records.append(compute_record(f"img{i}", img, ref))
        return MetricsReport(method=method, records=tuple(records))

    def test_means_are_arithmetic(self, rng):
        report = self._report(rng, with_ref=True)
        assert report.mean_c_l == pytest.approx(
            sum(r.c_l for r in report.records) / 3)
        assert report.mean_psnr == pytest.approx(
            sum(r.psnr for r in report.records) / 3)

    def test_row_count_is_records_plus_summary(self, rng):
        report = self._report(rng, with_ref=False)
        lines = report.to_lines()
        assert len(lines) == len(report.records) + 1
        assert lines[-1].startswith("mean")

    def test_no_reference_leaves_psnr_unset(self, rng):
        report = self._report(rng, with_ref=False)
        assert all(r.psnr is None and r.mse is None for r in report.records)
        assert report.mean_psnr is None

    def test_save_load_round_trip(self, rng, tmp_path):
        reports = [self._report(rng, with_ref=True, method="identity"),
                   self._report(rng, with_ref=False, method="gaussian")]
        save_reports(reports, tmp_path / "m.jsonl")
        back = load_reports(tmp_path / "m.jsonl")
        assert back == reports

    def test_summary_table_structure(self, rng):
        reports = [self._report(rng, with_ref=True)]
        lines = summary_table(reports).splitlines()
        assert len(lines) == 3  # header, rule, one method row
        assert "method" in lines[0] and "identity" in lines[2]

    def test_no_edges_flag_excluded_from_cpbd_mean(self):
        sharp = MetricsRecord(image_id="a", c_l=1.0, cpbd=0.5, no_edges=False,
                              mse=None, psnr=None)
        flat = MetricsRecord(image_id="b", c_l=0.0, cpbd=1.0, no_edges=True,
                             mse=None, psnr=None)
        report = MetricsReport(method="identity", records=(sharp, flat))
        assert report.mean_cpbd == 0.5
