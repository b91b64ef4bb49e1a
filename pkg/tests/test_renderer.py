"""Texture renderer network, composition rule, SSIM metric, and training."""

import numpy as np
import pytest

from camotex import fileio
from camotex import tensor as T
from camotex.renderer import (
    NtrModel,
    NtrTrainReport,
    held_out_pairs,
    ntr_compose,
    ntr_forward,
    ntr_train,
    ssim,
)
from camotex.scenegen import (
    BOUNDARY_COLORS,
    CameraPoseSet,
    default_object,
    generate_dataset,
    render_ground_truth,
)

import oracles


def tiny_dataset(poses=4, resolution=32, seed=0, kinds=("sphere",)):
    objs = [default_object(k) for k in kinds]
    return generate_dataset(CameraPoseSet(), objs, BOUNDARY_COLORS,
                            poses_per_object=poses, seed=seed, resolution=resolution)


@pytest.fixture(scope="module")
def trained_tiny():
    records = tiny_dataset()
    model = NtrModel(seed=0)
    report = ntr_train(model, records, epochs=6, batch_size=8, seed=0,
                       held_out_colors=4)
    return model, records, report


class TestModel:
    def test_parameter_count_is_frozen(self):
        # hand-summed from the stage plan: four encoder convs, four decoder
        # convs on concatenated skips, two 1x1 heads
        assert NtrModel().parameter_count() == 54870

    def test_same_seed_same_weights(self):
        a, b = NtrModel(seed=3), NtrModel(seed=3)
        for name in a.weights:
            assert np.array_equal(a.weights[name].data, b.weights[name].data)

    def test_different_seed_differs(self):
        a, b = NtrModel(seed=0), NtrModel(seed=1)
        assert any(
            not np.array_equal(a.weights[n].data, b.weights[n].data) for n in a.weights
        )

    def test_checkpoint_roundtrip(self, tmp_path):
        model = NtrModel(seed=2)
        path = tmp_path / "ntr.ckpt"
        fileio.save_checkpoint(path, model.state_arrays())
        other = NtrModel(seed=9)
        other.load_state(fileio.load_checkpoint(path))
        rng = np.random.default_rng(0)
        ref = rng.uniform(0, 1, size=(16, 16, 3))
        eta = rng.uniform(0, 1, size=(16, 16, 3))
        assert np.array_equal(
            ntr_forward(model, ref, eta).data, ntr_forward(other, ref, eta).data
        )

    def test_load_state_validation(self):
        model = NtrModel()
        with pytest.raises(ValueError, match="missing"):
            model.load_state({})
        bad = model.state_arrays()
        bad["enc1.kernel"] = bad["enc1.kernel"][..., :-1]
        with pytest.raises(ValueError, match="shape"):
            model.load_state(bad)


class TestForward:
    def test_fresh_model_output_in_range(self):
        model = NtrModel(seed=0)
        rng = np.random.default_rng(1)
        out = ntr_forward(
            model, rng.uniform(0, 1, size=(24, 24, 3)), rng.uniform(0, 1, size=(24, 24, 3))
        )
        assert out.shape == (24, 24, 3)
        assert np.isfinite(out.data).all()
        assert out.data.min() >= 0.0 and out.data.max() <= 1.0

    def test_identity_composition_hook(self):
        rng = np.random.default_rng(2)
        eta = rng.uniform(-0.5, 1.5, size=(8, 8, 3))
        ones = T.constant(np.ones((8, 8, 3)))
        zeros = T.constant(np.zeros((8, 8, 3)))
        out = ntr_compose(T.constant(eta), ones, zeros)
        assert np.array_equal(out.data, np.clip(eta, 0.0, 1.0))

    def test_shape_mismatch_errors(self):
        model = NtrModel()
        with pytest.raises(ValueError, match="must both be"):
            ntr_forward(model, np.zeros((16, 16, 3)), np.zeros((8, 8, 3)))

    def test_spatial_size_must_be_multiple_of_eight(self):
        model = NtrModel()
        with pytest.raises(ValueError, match="multiple of 8"):
            ntr_forward(model, np.zeros((20, 20, 3)), np.zeros((20, 20, 3)))

    def test_tf_maps_identical_across_textures(self):
        model = NtrModel(seed=4)
        rng = np.random.default_rng(3)
        ref = rng.uniform(0, 1, size=(1, 16, 16, 3))
        mult_a, add_a = model.transformation_features(T.constant(ref))
        mult_b, add_b = model.transformation_features(T.constant(ref))
        assert np.array_equal(mult_a.data, mult_b.data)
        assert np.array_equal(add_a.data, add_b.data)
        # so two textures differ only through the composition rule
        eta1 = rng.uniform(0, 1, size=(16, 16, 3))
        eta2 = rng.uniform(0, 1, size=(16, 16, 3))
        out1 = ntr_forward(model, ref[0], eta1)
        out2 = ntr_forward(model, ref[0], eta2)
        want1 = ntr_compose(T.constant(eta1[None]), mult_a, add_a).data[0]
        want2 = ntr_compose(T.constant(eta2[None]), mult_a, add_a).data[0]
        assert np.array_equal(out1.data, want1)
        assert np.array_equal(out2.data, want2)

    def test_gradient_wrt_texture_matches_finite_differences(self):
        model = NtrModel(seed=5)
        rng = np.random.default_rng(4)
        ref = rng.uniform(0.2, 0.8, size=(8, 8, 3))
        eta = T.parameter(rng.uniform(0.3, 0.7, size=(8, 8, 3)))
        err = oracles.gradcheck(lambda: ntr_forward(model, ref, eta), [eta])
        assert err < 1e-5

    def test_gradient_wrt_weights_matches_finite_differences(self):
        model = NtrModel(seed=6)
        rng = np.random.default_rng(5)
        ref = rng.uniform(0.2, 0.8, size=(8, 8, 3))
        eta = rng.uniform(0.3, 0.7, size=(8, 8, 3))
        kernel = model.weights["dec1.kernel"]

        def build():
            return T.reduce_mean(ntr_forward(model, ref, eta))

        indices = rng.choice(kernel.data.size, size=20, replace=False)
        err = oracles.gradcheck_sparse(build, kernel, indices)
        assert err < 1e-5


class TestSsim:
    def test_self_similarity_is_one(self):
        rng = np.random.default_rng(6)
        x = rng.uniform(0, 1, size=(16, 16, 3))
        assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)

    def test_zeros_vs_ones_is_tiny(self):
        assert ssim(np.zeros((12, 12)), np.ones((12, 12))) < 0.01

    def test_symmetry(self):
        rng = np.random.default_rng(7)
        a = rng.uniform(0, 1, size=(14, 14, 3))
        b = rng.uniform(0, 1, size=(14, 14, 3))
        assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)

    def test_too_small_image_errors(self):
        with pytest.raises(ValueError, match="window"):
            ssim(np.zeros((7, 20)), np.zeros((7, 20)))

    def test_shape_mismatch_errors(self):
        with pytest.raises(ValueError, match="mismatch"):
            ssim(np.zeros((10, 10)), np.zeros((10, 11)))

    def test_matches_naive_window_loop(self):
        rng = np.random.default_rng(8)
        a = rng.uniform(0, 1, size=(9, 11, 2))
        b = np.clip(a + rng.normal(0, 0.1, size=a.shape), 0, 1)

        c1, c2 = 1e-4, 9e-4
        vals = []
        for ch in range(2):
            for i in range(2):
                for j in range(4):
                    wa = a[i : i + 8, j : j + 8, ch]
                    wb = b[i : i + 8, j : j + 8, ch]
                    ma, mb = wa.mean(), wb.mean()
                    va = (wa * wa).mean() - ma * ma
                    vb = (wb * wb).mean() - mb * mb
                    cab = (wa * wb).mean() - ma * mb
                    vals.append(
                        (2 * ma * mb + c1) * (2 * cab + c2)
                        / ((ma * ma + mb * mb + c1) * (va + vb + c2))
                    )
        assert ssim(a, b) == pytest.approx(np.mean(vals), abs=1e-12)

    def test_noise_lowers_score_monotonically(self):
        rng = np.random.default_rng(9)
        x = rng.uniform(0.2, 0.8, size=(24, 24))
        small = np.clip(x + rng.normal(0, 0.02, size=x.shape), 0, 1)
        large = np.clip(x + rng.normal(0, 0.3, size=x.shape), 0, 1)
        assert ssim(x, large) < ssim(x, small) < 1.0


class TestTraining:
    def test_empty_dataset_errors(self):
        with pytest.raises(ValueError, match="empty"):
            ntr_train(NtrModel(), [], epochs=1)

    def test_report_validates_ssim_range(self):
        with pytest.raises(ValueError, match="SSIM"):
            NtrTrainReport(held_out_ssim=1.5)

    def test_one_epoch_decreases_loss_for_most_seeds(self):
        records = tiny_dataset(poses=2)[:10]
        wins = 0
        for seed in range(10):
            model = NtrModel(seed=seed)
            report = ntr_train(model, records, epochs=1, batch_size=8,
                               seed=seed, held_out_colors=1)
            if report.final_loss < report.initial_loss:
                wins += 1
        assert wins >= 9

    def test_trained_model_beats_constant_baseline(self, trained_tiny):
        _, _, report = trained_tiny
        assert report.held_out_ssim > report.constant_baseline_ssim

    def test_held_out_colors_are_unseen(self, trained_tiny):
        _, records, _ = trained_tiny
        pairs = held_out_pairs(records, count=4, seed=0)
        train_colors = np.array(BOUNDARY_COLORS)
        for _, color in pairs:
            gaps = np.abs(train_colors - color).sum(axis=1)
            assert gaps.min() > 1e-6

    def test_trained_model_tracks_analytic_ground_truth(self, trained_tiny):
        model, records, _ = trained_tiny
        sample = records[0]["sample"]
        rng = np.random.default_rng(10)
        color = rng.uniform(0.1, 0.9, size=3)
        mask = sample.mask[..., None]
        eta_p = color * mask
        x_adv_m = ntr_forward(model, sample.x_ref_m, eta_p).data
        pred = x_adv_m * mask + sample.x_bg
        assert ssim(pred, render_ground_truth(sample, eta_p)) > 0.9

    def test_report_shapes(self, trained_tiny):
        _, records, report = trained_tiny
        assert len(report.epoch_losses) == 6
        assert report.train_size == len(records)
        n_samples = len({id(r["sample"]) for r in records})
        assert report.held_out_size == n_samples * 4
        assert -1.0 <= report.held_out_ssim <= 1.0

    def test_training_is_deterministic(self):
        records = tiny_dataset(poses=2)
        reports = []
        for _ in range(2):
            model = NtrModel(seed=1)
            reports.append(
                ntr_train(model, records, epochs=2, batch_size=8, seed=3,
                          held_out_colors=2)
            )
        assert reports[0].epoch_losses == reports[1].epoch_losses
        assert reports[0].held_out_ssim == reports[1].held_out_ssim
