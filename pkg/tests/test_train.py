"""Training loop, metrics, importance, and ablation harness tests."""

import math

import numpy as np
import pytest

from pace.checkpoint import save_checkpoint
from pace.dataset import FEATURE_NAMES, PreparedData, WindowSet
from pace.errors import DomainError, InputError, NumericError
from pace.model import ModelConfig, build_model, count_params_flops
from pace.train import (TrainConfig, config_digest, efficiency, evaluate,
                        permutation_importance, predict, prepared_variant,
                        run_ablation, run_training, split_train_val, train,
                        write_history)

TINY = ModelConfig(window=8, features=8, channels=8, kernel=3, dtb_count=2,
                   units_per_dtb=1, cab_every=2, heads=2, chunk=4,
                   conv_dropout=0.1, attn_dropout=0.0, horizons=(1, 2),
                   conv_head_window=3)


def make_windows(rng, cells=2, per_cell=12, window=8, features=8,
                 n_horizons=2, targets=None):
    n = cells * per_cell
    x = rng.uniform(0.0, 1.0, size=(n, window, features)).astype(np.float32)
    if targets is None:
        targets = rng.uniform(0.7, 1.0, size=(n, n_horizons)).astype(np.float32)
    ids = np.array([f"cell{c}" for c in range(cells) for _ in range(per_cell)])
    anchors = np.array([100 + i for _ in range(cells) for i in range(per_cell)],
                       dtype=np.int64)
    return WindowSet(x, targets, ids, anchors, FEATURE_NAMES[:features])


def rig_constant_model(config, values):
    """Model whose every prediction is the constant vector ``values``."""
    model = build_model(config, seed=0)
    for name, p in model.params.items():
        if name.endswith(".conv.v"):
            continue  # zero direction is rejected; zeroing g suffices
        p.data[...] = 0.0
    model.params["dhb.conv_out.b"].data[...] = values
    model.params["dhb.linear.b"].data[...] = values
    return model


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert cfg.batch_size == 32 and cfg.max_epochs == 200
        assert cfg.patience == 20 and cfg.lr == 1e-3
        assert cfg.seeds == (17, 42, 1234) and cfg.val_fraction == 0.1

    def test_validation(self):
        with pytest.raises(InputError):
            TrainConfig(batch_size=0)
        with pytest.raises(InputError):
            TrainConfig(patience=200, max_epochs=200)
        with pytest.raises(InputError):
            TrainConfig(val_fraction=1.0)
        with pytest.raises(InputError):
            TrainConfig(lr=-1e-3)
        with pytest.raises(InputError):
            TrainConfig(seeds=())

    def test_round_trip_and_unknown_field(self):
        cfg = TrainConfig(batch_size=16, seeds=(1, 2))
        assert TrainConfig.from_dict(cfg.to_dict()) == cfg
        with pytest.raises(InputError):
            TrainConfig.from_dict({"momentum": 0.9})


class TestSplit:
    def test_trailing_windows_per_cell(self):
        rng = np.random.default_rng(0)
        a = make_windows(rng, cells=1, per_cell=10)
        b = make_windows(rng, cells=1, per_cell=5)
        b.cell_ids[:] = "other"
        ws = WindowSet.concat([a, b])
        tr, va = split_train_val(ws, 0.2)
        assert len(va) == 2 + 1 and len(tr) == 8 + 4
        for cell in ("cell0", "other"):
            t_anchor = tr.anchors[tr.cell_ids == cell].max()
            v_anchor = va.anchors[va.cell_ids == cell].min()
            assert t_anchor < v_anchor

    def test_small_cells(self):
        rng = np.random.default_rng(1)
        # 2 windows: fraction rounds to 0 but a cell with >1 windows
        # still contributes one; a singleton cell contributes none.
        two = make_windows(rng, cells=1, per_cell=2)
        one = make_windows(rng, cells=1, per_cell=1)
        one.cell_ids[:] = "solo"
        tr, va = split_train_val(WindowSet.concat([two, one]), 0.1)
        assert len(va) == 1 and va.cell_ids[0] == "cell0"
        assert "solo" in tr.cell_ids

    def test_fraction_bounds(self):
        ws = make_windows(np.random.default_rng(2))
        with pytest.raises(InputError):
            split_train_val(ws, 0.0)


class TestTrainLoop:
    def test_early_stop_mechanics(self):
        # lr=0 freezes the weights, so epoch 1 sets the best validation
        # loss and epoch 2 cannot strictly improve on it.
        ws = make_windows(np.random.default_rng(3))
        model = build_model(TINY, seed=1)
        before = {k: p.data.copy() for k, p in model.params.items()}
        cfg = TrainConfig(batch_size=8, max_epochs=50, patience=1, lr=0.0)
        history = train(model, ws, cfg, seed=1)
        assert len(history) == 2
        assert not history[0].stopped and history[1].stopped
        assert history[0].val_mse == history[1].val_mse
        for k, p in model.params.items():
            assert np.array_equal(p.data, before[k])

    def test_determinism(self, tmp_path):
        ws = make_windows(np.random.default_rng(4))
        cfg = TrainConfig(batch_size=8, max_epochs=3, patience=2, lr=1e-3)
        runs = []
        for attempt in range(2):
            model = build_model(TINY, seed=9)
            history = train(model, ws, cfg, seed=9)
            path = tmp_path / f"run{attempt}.ckpt"
            save_checkpoint(path, model)
            runs.append((history, path.read_bytes()))
        assert runs[0][0] == runs[1][0]
        assert runs[0][1] == runs[1][1]

    def test_loss_decreases_on_learnable_task(self):
        rng = np.random.default_rng(5)
        ws = make_windows(rng, per_cell=16)
        # constant target: the head biases alone can fit it
        ws.targets[...] = 0.85
        model = build_model(TINY, seed=2)
        cfg = TrainConfig(batch_size=8, max_epochs=12, patience=11, lr=3e-3)
        history = train(model, ws, cfg, seed=2)
        assert history[-1].train_mse < history[0].train_mse * 0.2

    def test_restored_weights_match_best_epoch(self):
        ws = make_windows(np.random.default_rng(6), per_cell=16)
        model = build_model(TINY, seed=3)
        cfg = TrainConfig(batch_size=8, max_epochs=6, patience=5, lr=3e-3)
        history = train(model, ws, cfg, seed=3)
        _, val_ws = split_train_val(ws, cfg.val_fraction)
        preds = predict(model, val_ws.features, clamp=False)
        diff = preds.astype(np.float64) - val_ws.targets.astype(np.float64)
        recomputed = float((diff ** 2).mean())
        assert recomputed <= min(r.val_mse for r in history) + 1e-12

    def test_error_cases(self):
        ws = make_windows(np.random.default_rng(7))
        model = build_model(TINY, seed=4)
        cfg = TrainConfig(batch_size=8, max_epochs=2, patience=1)
        with pytest.raises(InputError):
            train(model, ws.take(np.array([], dtype=np.int64)), cfg, seed=0)
        bad = make_windows(np.random.default_rng(8), n_horizons=3)
        with pytest.raises(InputError):
            train(model, bad, cfg, seed=0)
        model.params["input_proj.b"].data[...] = np.inf
        with np.errstate(invalid="ignore"), pytest.raises(NumericError,
                                                          match="epoch"):
            train(model, ws, cfg, seed=0)

    def test_history_csv(self, tmp_path):
        ws = make_windows(np.random.default_rng(9))
        model = build_model(TINY, seed=5)
        cfg = TrainConfig(batch_size=8, max_epochs=2, patience=1)
        history = train(model, ws, cfg, seed=5)
        path = tmp_path / "history.csv"
        write_history(path, history)
        lines = path.read_text().splitlines()
        assert lines[0] == "epoch,train_mse,val_mse,stopped"
        assert len(lines) == 1 + len(history)
        first = lines[1].split(",")
        assert first[0] == "1" and first[3] in ("true", "false")
        assert math.isclose(float(first[1]), history[0].train_mse,
                            rel_tol=1e-8)


class TestEvaluate:
    def test_perfect_predictions(self):
        model = rig_constant_model(TINY, np.array([0.9, 0.8], np.float32))
        ws = make_windows(np.random.default_rng(10))
        ws.targets[:, 0] = 0.9
        ws.targets[:, 1] = 0.8
        m = evaluate(model, ws, horizons=(1, 2))
        assert m.rmse[1] == 0.0 and m.mae[1] == 0.0
        assert m.rmse[2] == 0.0 and m.mae[2] == 0.0
        assert math.isinf(m.eta[1])

    def test_constant_offset_closed_form(self):
        model = rig_constant_model(TINY, np.array([0.9, 0.9], np.float32))
        ws = make_windows(np.random.default_rng(11))
        ws.targets[...] = 1.0
        m = evaluate(model, ws, horizons=(1, 2))
        for h in (1, 2):
            assert math.isclose(m.rmse[h], 0.1, rel_tol=1e-6)
            assert math.isclose(m.mae[h], 0.1, rel_tol=1e-6)
        params, flops = count_params_flops(model)
        assert m.param_count == params and m.flops == flops
        assert math.isclose(m.eta[1], 1000.0 / (m.rmse[1] * params / 1000.0),
                            rel_tol=1e-12)
        assert math.isclose(m.mean_eta, np.mean([m.eta[1], m.eta[2]]))

    def test_clamped_vs_raw(self):
        # biases above the clamp ceiling: eval metrics use the clamped
        # output, raw metrics expose the unclamped one
        model = rig_constant_model(TINY, np.array([1.2, 1.2], np.float32))
        ws = make_windows(np.random.default_rng(12))
        ws.targets[...] = 1.0
        m = evaluate(model, ws, horizons=(1,))
        assert math.isclose(m.rmse[1], 0.05, rel_tol=1e-5)
        assert math.isclose(m.rmse_raw[1], 0.2, rel_tol=1e-5)

    def test_pure(self):
        model = build_model(TINY, seed=6)
        ws = make_windows(np.random.default_rng(13))
        a = evaluate(model, ws, horizons=(1, 2))
        b = evaluate(model, ws, horizons=(1, 2))
        assert a.rmse == b.rmse and a.mae == b.mae and a.eta == b.eta

    def test_unknown_horizon(self):
        model = build_model(TINY, seed=7)
        ws = make_windows(np.random.default_rng(14))
        with pytest.raises(InputError, match="horizon"):
            evaluate(model, ws, horizons=(1, 30))
        with pytest.raises(InputError):
            evaluate(model, ws.take(np.array([], dtype=np.int64)), (1,))


class TestEfficiency:
    def test_published_style_values(self):
        assert math.isclose(efficiency(0.023, 70.9), 613.2, abs_tol=0.05)
        assert math.isclose(efficiency(0.014, 2559.5), 27.9, abs_tol=0.05)
        assert efficiency(1.0, 1.0) == 1000.0

    def test_strictly_decreasing(self):
        grid = [0.01, 0.02, 0.05, 0.1, 0.5, 1.0]
        for fixed in grid:
            by_rmse = [efficiency(r, fixed) for r in grid]
            by_size = [efficiency(fixed, p) for p in grid]
            assert all(a > b for a, b in zip(by_rmse, by_rmse[1:]))
            assert all(a > b for a, b in zip(by_size, by_size[1:]))

    def test_domain(self):
        with pytest.raises(DomainError):
            efficiency(0.0, 70.9)
        with pytest.raises(DomainError):
            efficiency(0.02, -1.0)


class TestImportance:
    def test_planted_signal(self):
        # target is feature 3 at the anchor cycle; a trained model must
        # lean on that column almost exclusively
        rng = np.random.default_rng(15)
        config = ModelConfig(window=8, features=4, channels=8, kernel=3,
                             dtb_count=2, units_per_dtb=1, cab_every=2,
                             heads=2, chunk=4, conv_dropout=0.0,
                             attn_dropout=0.0, horizons=(1,),
                             conv_head_window=3)
        ws = make_windows(rng, cells=2, per_cell=64, features=4,
                          n_horizons=1)
        ws.targets[:, 0] = ws.features[:, -1, 3]
        model = build_model(config, seed=8)
        cfg = TrainConfig(batch_size=32, max_epochs=300, patience=299,
                          lr=5e-3)
        train(model, ws, cfg, seed=8)
        result = permutation_importance(model, ws, seed=0)
        assert result.percent[3] > 90.0
        assert math.isclose(result.percent.sum(), 100.0, abs_tol=1e-6)

    def test_dead_input(self):
        model = build_model(TINY, seed=9)
        model.params["input_proj.w"].data[2, :] = 0.0
        ws = make_windows(np.random.default_rng(16))
        result = permutation_importance(model, ws, seed=1)
        assert result.percent[2] == 0.0 and result.raw[2] == 0.0
        assert math.isclose(result.percent.sum(), 100.0, abs_tol=1e-6)
        assert np.all(result.percent >= 0.0)

    def test_all_zero_reports_uniform(self, caplog):
        model = build_model(TINY, seed=10)
        model.params["input_proj.w"].data[...] = 0.0
        ws = make_windows(np.random.default_rng(17))
        with caplog.at_level("WARNING", logger="pace.train"):
            result = permutation_importance(model, ws, seed=2)
        assert np.allclose(result.percent, 12.5)
        assert any("uniform" in r.message for r in caplog.records)

    def test_deterministic_in_seed(self):
        model = build_model(TINY, seed=11)
        ws = make_windows(np.random.default_rng(18))
        a = permutation_importance(model, ws, seed=3)
        b = permutation_importance(model, ws, seed=3)
        assert np.array_equal(a.percent, b.percent)


class TestRuns:
    def make_prepared(self, seed=19, per_cell=10):
        rng = np.random.default_rng(seed)
        return PreparedData(train=make_windows(rng, cells=2, per_cell=per_cell),
                            test=make_windows(rng, cells=1, per_cell=6),
                            window=8, horizons=(1, 2))

    def test_run_training_report(self):
        prepared = self.make_prepared()
        cfg = TrainConfig(batch_size=8, max_epochs=3, patience=2,
                          seeds=(11, 12))
        report, artifacts = run_training(prepared, TINY, cfg,
                                         eval_horizons=(1, 2))
        assert report.variant == "base" and report.seeds == (11, 12)
        assert len(report.metrics) == 2 and len(report.histories) == 2
        assert all(len(h) <= cfg.max_epochs for h in report.histories)
        assert set(artifacts["models"]) == {11, 12}
        assert math.isfinite(report.mean_rmse(1))
        assert report.std_rmse(1) >= 0.0
        d = report.to_dict()
        assert d["config_digest"] == report.config_digest
        assert len(d["metrics"]) == 2

    def test_digest_ignores_seeds_only(self):
        a = config_digest(TINY, TrainConfig(seeds=(1, 2)))
        b = config_digest(TINY, TrainConfig(seeds=(3,)))
        c = config_digest(TINY, TrainConfig(seeds=(1, 2), lr=5e-3))
        assert a == b and a != c

    def test_feature_count_mismatch(self):
        prepared = self.make_prepared()
        bad = ModelConfig(window=8, features=4, channels=8, dtb_count=2,
                          cab_every=2, heads=2, chunk=4, horizons=(1, 2),
                          conv_head_window=3)
        with pytest.raises(InputError, match="features"):
            run_training(prepared, bad, TrainConfig(max_epochs=2, patience=1))

    def test_prepared_variant_projection(self):
        prepared = self.make_prepared()
        reduced = prepared_variant(prepared, "no_physics")
        assert reduced.train.features.shape[2] == 4
        assert reduced.feature_names == FEATURE_NAMES[:4]
        np.testing.assert_array_equal(reduced.train.features,
                                      prepared.train.features[:, :, :4])
        assert prepared_variant(prepared, "single_head") is prepared

    def test_run_ablation_no_physics(self):
        prepared = self.make_prepared(per_cell=8)
        cfg = TrainConfig(batch_size=8, max_epochs=2, patience=1, seeds=(7,))
        base, variant = run_ablation(TINY, "no_physics", prepared, cfg,
                                     eval_horizons=(1, 2))
        assert base.variant == "base" and variant.variant == "no_physics"
        assert variant.model_config.features == 4
        assert variant.metrics[0].param_count < base.metrics[0].param_count
        assert base.config_digest != variant.config_digest

    def test_run_ablation_unknown_variant(self):
        prepared = self.make_prepared()
        with pytest.raises(InputError):
            run_ablation(TINY, "bigger", prepared, TrainConfig())
