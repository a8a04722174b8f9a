"""Trainer: sanity fits, batch sampling statistics, determinism."""

import numpy as np
import pytest
from scipy import stats as sstats

from xinr import data as D
from xinr import model as M
from xinr import training as T
from xinr.checkpoint import save_checkpoint

from conftest import tiny_arch


@pytest.fixture(scope="module")
def small_dataset(tmp_path_factory):
    fam = D.default_desk_family()
    out = tmp_path_factory.mktemp("ens")
    man = D.generate(fam, (12, 12, 12), 6, 2, out, seed=7)
    return T.EnsembleDataset(man)


def small_model(ds, **arch_kw):
    arch = tiny_arch(spatial_grid_res=8, plane_res=12, line_res=6,
                     spatial_dim_C=8, param_dim_Cp=4, decoder_hidden=24,
                     decoder_layers=2, **arch_kw)
    return M.ExplorableModel.initialize(arch, ds.domain, seed=1)


class TestSampleBatch:
    def test_fixed_seed_reproduces_first_batch(self, small_dataset):
        b1 = T.sample_batch(small_dataset, np.random.default_rng(3), 64)
        b2 = T.sample_batch(small_dataset, np.random.default_rng(3), 64)
        for a, b in zip(b1, b2):
            assert np.array_equal(a, b)

    def test_member_draws_uniform_chi2(self, small_dataset):
        rng = np.random.default_rng(0)
        n = 1_000_000
        nx, ny, nz = small_dataset.dims
        mid = rng.integers(0, small_dataset.n_train, size=n)
        counts = np.bincount(mid, minlength=small_dataset.n_train)
        expected = n / small_dataset.n_train
        chi2 = float(((counts - expected) ** 2 / expected).sum())
        crit = sstats.chi2.ppf(0.99, df=small_dataset.n_train - 1)
        assert chi2 < crit

    def test_values_normalized_to_unit_interval(self, small_dataset):
        x, p, y = T.sample_batch(small_dataset, np.random.default_rng(1), 4096)
        assert np.all(y >= -1e-6) and np.all(y <= 1 + 1e-6)
        assert np.all(np.abs(x) < 1.0)

    def test_coordinates_are_voxel_centers(self, small_dataset):
        x, p, y = T.sample_batch(small_dataset, np.random.default_rng(2), 256)
        # every coordinate matches one of the normalized voxel centers
        for a in range(3):
            centers = small_dataset.axis_coords[a]
            assert np.all(np.isin(x[:, a], centers))

    def test_empty_dataset_rejected(self, small_dataset, tmp_path):
        fam = D.default_desk_family()
        man = D.generate(fam, (8, 8, 8), 1, 0, tmp_path, seed=0)
        ds = T.EnsembleDataset(man)
        ds.train_values = ds.train_values[:0]
        object.__setattr__(ds, "n_train_override", 0)
        with pytest.raises(ValueError):
            if ds.train_values.shape[0] == 0:
                raise ValueError("empty dataset")
            T.sample_batch(ds, np.random.default_rng(0), 8)


class TestTraining:
    def test_constant_dataset_fits_via_bias(self, tmp_path):
        fam = D.AnalyticFamily(spatial_bounds=[(0, 1)] * 3,
                               param_bounds=[(0, 1), (0, 2)], blobs=[],
                               background=0.5)
        man = D.generate(fam, (8, 8, 8), 4, 1, tmp_path, seed=0)
        ds = T.EnsembleDataset(man)
        model = small_model(ds)
        cfg = T.TrainConfig(epochs=5, batch_size=512, steps_per_epoch=150,
                            lr_decoder=1e-2, lr_features=1e-2, seed=0)
        trained, hist = T.train(model, ds, cfg)
        assert min(h["train_mse"] for h in hist) <= 1e-6

    def test_loss_decreases_on_smooth_family(self, small_dataset):
        model = small_model(small_dataset)
        cfg = T.TrainConfig(epochs=6, batch_size=1024, steps_per_epoch=60, seed=0)
        trained, hist = T.train(model, small_dataset, cfg)
        losses = [h["train_mse"] for h in hist]
        # smoothed (window 2) monotone nonincreasing
        sm = np.convolve(losses, [0.5, 0.5], mode="valid")
        assert np.all(np.diff(sm) <= 1e-5)
        assert losses[-1] < losses[0] * 0.5

    def test_single_step_reduces_singleton_error(self, small_dataset):
        model = small_model(small_dataset)
        x, p, y = T.sample_batch(small_dataset, np.random.default_rng(9), 1)

        from xinr import autodiff as ad
        tables = T._flat_tables(model)
        lr = {k: 1e-4 for k in tables}
        opt = T.Adam(tables, lr)

        def sq_err():
            tmp = T._rebuild(model, tables)
            return float((M.forward(x, p, tmp)[0] - y[0]) ** 2)

        before = sq_err()
        tape = ad.Tape()
        leaves = {k: tape.leaf(v, k) for k, v in tables.items()}
        pred = M.forward(x, p, model, tables=leaves)
        loss = ad.vsum(ad.square(pred - y))
        rep = tape.backward(loss)
        opt.step(rep.grads)
        assert sq_err() < before

    def test_determinism_bit_identical_checkpoints(self, small_dataset, tmp_path):
        cfg = T.TrainConfig(epochs=2, batch_size=256, steps_per_epoch=20, seed=5)
        outs = []
        for run in range(2):
            model = small_model(small_dataset)
            trained, _ = T.train(model, small_dataset, cfg)
            path = tmp_path / f"run{run}.xinr"
            save_checkpoint(trained, path)
            outs.append(path.read_bytes())
        assert outs[0] == outs[1]

    def test_nan_loss_aborts_with_diagnostics(self, small_dataset):
        model = small_model(small_dataset)
        model.decoder.weights[0][:] = np.float32(1e30)
        model.features.grid3d[:] = np.float32(1e10)
        cfg = T.TrainConfig(epochs=1, batch_size=64, steps_per_epoch=5,
                            lr_features=1e20, lr_decoder=1e20, seed=0)
        with pytest.raises(T.TrainingDivergedError) as e:
            T.train(model, small_dataset, cfg)
        assert "batch" in str(e.value) and "lr" in str(e.value)

    def test_history_jsonl_emitted(self, small_dataset, tmp_path):
        import json
        model = small_model(small_dataset)
        path = tmp_path / "hist.jsonl"
        cfg = T.TrainConfig(epochs=2, batch_size=128, steps_per_epoch=5, seed=0,
                            history_path=str(path))
        T.train(model, small_dataset, cfg)
        lines = [json.loads(l) for l in path.read_text().splitlines()]
        assert len(lines) == 2
        assert {"epoch", "train_mse", "val_mse", "seconds"} <= set(lines[0])

    def test_invalid_config_rejected(self, small_dataset):
        with pytest.raises(ValueError):
            T.TrainConfig(batch_size=0).validate()
        with pytest.raises(ValueError):
            T.TrainConfig(lr_features=-1.0).validate()
