import math
import os

import numpy as np
import pytest
import torch
from datasets import SequenceDataset
from errors import ContractError
from evaluation import (
    PSNR_CAP,
    average_reports,
    copy_last_frame_baseline,
    derived_seed,
    evaluate_baseline,
    evaluate_stochastic,
    frame_report,
    mse_framewise,
    mse_sum_framewise,
    psnr_framewise,
    report_from_dict,
    report_to_dict,
    ssim_framewise,
)
from network import VRNN
from PIL import Image
from render import (
    HEADER_HEIGHT,
    LABEL_WIDTH,
    grid_shape,
    plot_curves,
    plot_sweep,
    render_grid,
    save_frames,
)


def frames(value: float, n: int = 3, size: int = 16) -> np.ndarray:
    return np.full((n, size, size, 1), value, dtype=np.float32)


def noisy_pair(rng: np.random.Generator, size: int = 32) -> tuple[np.ndarray, np.ndarray]:
    truth = rng.random((1, size, size, 1))
    noise = rng.normal(0, rng.uniform(0.01, 0.3), truth.shape)
    return np.clip(truth + noise, 0, 1), truth


class TestMSE:
    def test_identical(self):
        assert mse_framewise(frames(0.3), frames(0.3)).tolist() == [0.0] * 3

    def test_extremes(self):
        assert mse_framewise(frames(0.0), frames(1.0)).tolist() == [1.0] * 3

    def test_per_image_sum(self):
        assert mse_sum_framewise(frames(0.0), frames(1.0)).tolist() == [256.0] * 3
        assert mse_sum_framewise(frames(0.5), frames(0.0)).tolist() == [64.0] * 3

    def test_accepts_tensors(self):
        pred = torch.from_numpy(frames(0.2))
        np.testing.assert_allclose(mse_framewise(pred, frames(0.0)), [0.04] * 3, rtol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            mse_framewise(frames(0.0, n=3), frames(0.0, n=4))


class TestPSNR:
    def test_identical_frames_hit_the_cap(self):
        assert psnr_framewise(frames(0.4), frames(0.4)).tolist() == [PSNR_CAP] * 3

    def test_known_mse(self):
        psnr = psnr_framewise(frames(0.1), frames(0.0))
        np.testing.assert_allclose(psnr, [20.0] * 3, rtol=1e-6)

    def test_worst_case(self):
        assert psnr_framewise(frames(0.0), frames(1.0)).tolist() == [0.0] * 3


class TestSSIM:
    def test_identical_is_one(self):
        truth = np.random.default_rng(0).random((2, 16, 16, 1))
        np.testing.assert_allclose(ssim_framewise(truth, truth), [1.0, 1.0], atol=1e-12)

    def test_symmetric(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((2, 24, 24, 1)), rng.random((2, 24, 24, 1))
        np.testing.assert_allclose(ssim_framewise(a, b), ssim_framewise(b, a), atol=1e-12)

    def test_bounded(self):
        rng = np.random.default_rng(2)
        value = ssim_framewise(rng.random((4, 16, 16, 1)), rng.random((4, 16, 16, 1)))
        assert np.all(value <= 1.0) and np.all(value >= -1.0)

    def test_rgb_averages_channels(self):
        rng = np.random.default_rng(3)
        a, b = rng.random((1, 16, 16, 3)), rng.random((1, 16, 16, 3))
        per_channel = [ssim_framewise(a[..., c], b[..., c])[0] for c in range(3)]
        assert ssim_framewise(a, b)[0] == pytest.approx(np.mean(per_channel))

    def test_small_frames(self):
        with pytest.raises(ContractError):
            ssim_framewise(frames(0.0, size=8), frames(0.0, size=8))

    def test_matches_opencv(self):
        cv2 = pytest.importorskip("cv2")

        def reference(a: np.ndarray, b: np.ndarray) -> float:
            c1, c2 = 0.01**2, 0.03**2

            def blur(x):
                return cv2.GaussianBlur(x, (11, 11), 1.5)

            mu_a, mu_b = blur(a), blur(b)
            var_a = blur(a * a) - mu_a**2
            var_b = blur(b * b) - mu_b**2
            cov = blur(a * b) - mu_a * mu_b
            ssim_map = ((2 * mu_a * mu_b + c1) * (2 * cov + c2)) / (
                (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
            )
            # valid region only: drop the 5-pixel border the blur pads
            return float(ssim_map[5:-5, 5:-5].mean())

        rng = np.random.default_rng(4)
        for _ in range(50):
            pred, truth = noisy_pair(rng)
            expected = reference(pred[0, :, :, 0], truth[0, :, :, 0])
            assert abs(ssim_framewise(pred, truth)[0] - expected) < 1e-4


class TestBaseline:
    def test_repeats_last_frame(self):
        context = np.stack([frames(v, n=1)[0] for v in (0.1, 0.2, 0.3)])
        prediction = copy_last_frame_baseline(context, 4)
        assert prediction.shape == (4, 16, 16, 1)
        assert np.all(prediction == np.float32(0.3))

    def test_tensor_input(self):
        context = torch.arange(3.0).view(3, 1, 1, 1)
        prediction = copy_last_frame_baseline(context, 2)
        assert isinstance(prediction, torch.Tensor)
        assert prediction.flatten().tolist() == [2.0, 2.0]

    def test_zero_length(self):
        assert copy_last_frame_baseline(frames(0.1), 0).shape == (0, 16, 16, 1)

    def test_negative_length(self):
        with pytest.raises(ContractError):
            copy_last_frame_baseline(frames(0.1), -1)

    def test_static_sequence_is_perfect(self, tiny_sequences):
        static = [seq._replace(frames=np.repeat(seq.frames[:1], 8, axis=0)) for seq in tiny_sequences]
        report = evaluate_baseline(static, context_len=4, pred_len=4)
        assert report.mse_mean == 0.0
        assert report.psnr_mean == PSNR_CAP

    def test_baseline_report(self, tiny_sequences):
        report = evaluate_baseline(tiny_sequences, context_len=4, pred_len=4)
        assert len(report.per_frame_mse) == 4
        assert report.n_samples == 1
        assert np.all(report.per_frame_mse > 0)


class TestReports:
    def test_average(self, tiny_sequences):
        truth = tiny_sequences[0].frames[4:]
        a = frame_report(truth, truth)
        b = frame_report(np.zeros_like(truth), truth)
        mean = average_reports([a, b])
        np.testing.assert_allclose(mean.per_frame_mse, (a.per_frame_mse + b.per_frame_mse) / 2)
        assert mean.mse_mean == pytest.approx((a.mse_mean + b.mse_mean) / 2)

    def test_empty_average(self):
        with pytest.raises(ContractError):
            average_reports([])

    def test_dict_form_keeps_samples(self, tiny_sequences):
        truth = tiny_sequences[0].frames[4:]
        sample = frame_report(truth * 0.5, truth)
        report = average_reports([sample], samples=[sample])
        restored = report_from_dict(report_to_dict(report))
        assert restored.n_samples == 1
        assert restored.samples[0].mse_mean == sample.mse_mean
        np.testing.assert_array_equal(restored.per_frame_ssim, report.per_frame_ssim)

    def test_not_a_report(self):
        with pytest.raises(ContractError):
            report_from_dict({"mse_mean": 1.0})


class TestStochastic:
    @pytest.fixture
    def model(self, tiny_model_config, seeded):
        return VRNN(tiny_model_config()).eval()

    def test_report_lengths(self, model, tiny_sequences):
        report = evaluate_stochastic(model, tiny_sequences[:3], n_samples=2, context_len=4, pred_len=4)
        assert len(report.per_frame_mse) == len(report.per_frame_ssim) == 4
        assert report.n_samples == 2 and len(report.samples) == 2

    def test_aggregate_is_mean_of_samples(self, model, tiny_sequences):
        report = evaluate_stochastic(model, tiny_sequences[:3], n_samples=3, context_len=4, pred_len=4)
        assert report.mse_mean == pytest.approx(np.mean([s.mse_mean for s in report.samples]))
        np.testing.assert_allclose(
            report.per_frame_psnr, np.mean([s.per_frame_psnr for s in report.samples], axis=0)
        )

    def test_samples_do_not_depend_on_count(self, model, tiny_sequences):
        one = evaluate_stochastic(model, tiny_sequences[:2], n_samples=1, context_len=4, pred_len=4)
        two = evaluate_stochastic(model, tiny_sequences[:2], n_samples=2, context_len=4, pred_len=4)
        np.testing.assert_allclose(two.samples[0].per_frame_mse, one.samples[0].per_frame_mse, atol=1e-6)

    def test_seed_is_reproducible(self, model, tiny_sequences):
        runs = [
            evaluate_stochastic(model, tiny_sequences[:2], n_samples=2, context_len=4, pred_len=4, seed=7)
            for _ in range(2)
        ]
        assert runs[0].mse_mean == runs[1].mse_mean

    def test_global_rng_untouched(self, model, tiny_sequences):
        torch.manual_seed(5)
        expected = torch.rand(2)
        torch.manual_seed(5)
        evaluate_stochastic(model, tiny_sequences[:1], n_samples=2, context_len=4, pred_len=4)
        assert torch.equal(torch.rand(2), expected)

    def test_deterministic_model_is_sample_invariant(self, tiny_model_config, tiny_sequences):
        torch.manual_seed(0)
        model = VRNN(tiny_model_config(conv_dims=2, window=1, horizon=1, latent=False)).eval()
        one = evaluate_stochastic(model, tiny_sequences[:2], n_samples=1, context_len=4, pred_len=4)
        many = evaluate_stochastic(model, tiny_sequences[:2], n_samples=4, context_len=4, pred_len=4)
        np.testing.assert_allclose(many.per_frame_mse, one.per_frame_mse, atol=1e-6)

    def test_accepts_tensor_items(self, model, tiny_sequences):
        report = evaluate_stochastic(
            model, SequenceDataset(tiny_sequences[:2]), n_samples=1, context_len=4, pred_len=4
        )
        assert math.isfinite(report.mse_mean)

    def test_sequence_too_short(self, model, tiny_sequences):
        with pytest.raises(ContractError):
            evaluate_stochastic(model, tiny_sequences[:1], n_samples=1, context_len=4, pred_len=10)

    def test_zero_samples(self, model, tiny_sequences):
        with pytest.raises(ContractError):
            evaluate_stochastic(model, tiny_sequences[:1], n_samples=0, context_len=4, pred_len=4)

    def test_empty_testset(self, model):
        with pytest.raises(ContractError):
            evaluate_stochastic(model, [], n_samples=1)

    def test_derived_seeds(self):
        assert derived_seed(0, 1, 2) == derived_seed(0, 1, 2)
        assert len({derived_seed(0, i, s) for i in range(10) for s in range(10)}) == 100
        assert 0 <= derived_seed(3, 0, 0) < 2**63


class TestRender:
    def test_grid_size(self, tmp_path, tiny_sequences):
        rows = [("truth", tiny_sequences[0].frames), ("sample", tiny_sequences[1].frames)]
        path = render_grid(rows, str(tmp_path / "grid.png"), stride=2, scale=2)
        with Image.open(path) as image:
            assert image.size == (LABEL_WIDTH + 4 * 34, HEADER_HEIGHT + 2 * 34)

    def test_grid_shape_errors(self):
        with pytest.raises(ContractError):
            grid_shape([])
        with pytest.raises(ContractError):
            grid_shape([("a", frames(0.0, n=3)), ("b", frames(0.0, n=4))])
        with pytest.raises(ContractError):
            grid_shape([("a", frames(0.0))], stride=0)

    def test_save_frames(self, tmp_path):
        paths = save_frames(frames(0.5, n=3), str(tmp_path / "frames"))
        assert [os.path.basename(p) for p in paths] == ["frame_000.png", "frame_001.png", "frame_002.png"]
        with Image.open(paths[0]) as image:
            assert image.getpixel((0, 0)) == 128

    def test_plot_curves(self, tmp_path, tiny_sequences):
        truth = tiny_sequences[0].frames[4:]
        reports = {
            "model": frame_report(truth * 0.9, truth),
            "baseline": frame_report(np.zeros_like(truth), truth),
        }
        path = plot_curves(reports, str(tmp_path / "curves.png"))
        assert os.path.getsize(path) > 0

    def test_plot_unknown_metric(self, tmp_path, tiny_sequences):
        truth = tiny_sequences[0].frames[4:]
        with pytest.raises(ContractError):
            plot_curves({"x": frame_report(truth, truth)}, str(tmp_path / "c.png"), metrics=("lpips",))

    def test_plot_sweep(self, tmp_path):
        records = [
            {"window": m, "horizon": h, "ssim_mean": 0.9 - 0.01 * m, "mse_mean": 0.01 * h, "psnr_mean": 20.0}
            for m, h in ((2, 1), (2, 2), (4, 1), (4, 2), (8, 4))
        ]
        path = plot_sweep(records, str(tmp_path / "sweep" / "sweep.png"))
        assert os.path.getsize(path) > 0

    def test_plot_sweep_empty(self, tmp_path):
        with pytest.raises(ContractError):
            plot_sweep([], str(tmp_path / "s.png"))
