import numpy as np
import pytest

from hydra_lstm import autodiff as ad
from hydra_lstm.autodiff import Tensor
from hydra_lstm.data import (
    Batch,
    CatchmentDataset,
    ConfigurationError,
    make_split_plans,
    record_years,
    synthesize_catchments,
)
from hydra_lstm.evaluation import evaluate_predictions
from hydra_lstm.models import Hyperparameters, ModelSpec, QuantileLstm, save_checkpoints
from hydra_lstm.objectives import cumulative_quantile_loss, empirical_coverage
from hydra_lstm.training import (
    Adam,
    EarlyStopper,
    OrderingError,
    TrainingConfig,
    TrainingError,
    clip_gradients,
    cross_validate,
    expand_grid,
    fit,
    grid_sweep,
    train_hydra_phase1,
    train_model,
    train_single_heads,
)

TINY = Hyperparameters(4, 1, 1e-2, 0.0, head_hidden_size=4, head_num_layers=1)
FAST = TrainingConfig(window=10, batch_size=256, max_epochs=3, patience=2)


@pytest.fixture(scope="module")
def datasets():
    return synthesize_catchments(3, 6, seed=11)


@pytest.fixture(scope="module")
def split(datasets):
    return make_split_plans(record_years(datasets), 1)[0]


# ---------------------------------------------------------------- optimizer


def _param(values):
    return {"w": Tensor(np.asarray(values, dtype=float), requires_grad=True)}


def test_adam_zero_gradient_leaves_parameters():
    params = _param([1.0, -2.0])
    params["w"].grad = np.zeros(2)
    Adam(0.1).step(params)
    assert params["w"].data.tolist() == [1.0, -2.0]
    assert params["w"].grad is None


def test_adam_first_step_is_learning_rate_times_sign():
    params = _param([0.0, 0.0, 0.0])
    params["w"].grad = np.array([3.0, -0.2, 50.0])
    Adam(1e-3).step(params)
    # bias-corrected m/sqrt(v) = g/|g| up to epsilon
    assert np.allclose(params["w"].data, [-1e-3, 1e-3, -1e-3], rtol=1e-6)


def test_adam_trajectories_are_reproducible():
    def run():
        rng = np.random.default_rng(0)
        params = _param(rng.normal(size=4))
        opt = Adam(1e-2)
        for _ in range(20):
            params["w"].grad = rng.normal(size=4)
            opt.step(params)
        return params["w"].data.tobytes()

    assert run() == run()


def test_adam_nan_gradient_names_parameter():
    params = {"body.layer0.W": Tensor(np.ones(2), requires_grad=True)}
    params["body.layer0.W"].grad = np.array([np.nan, 1.0])
    with pytest.raises(TrainingError, match="body.layer0.W"):
        Adam().step(params)


def test_clip_gradients():
    params = {"a": Tensor(np.zeros(2), requires_grad=True), "b": Tensor(np.zeros(1), requires_grad=True)}
    params["a"].grad = np.array([3.0, 0.0])
    params["b"].grad = np.array([4.0])
    norm, clipped = clip_gradients(params, 1.0)
    assert norm == 5.0 and clipped
    assert np.allclose(params["a"].grad, [0.6, 0.0]) and np.allclose(params["b"].grad, [0.8])
    assert clip_gradients(params, 1.0 + 1e-9) == (pytest.approx(1.0), False)


# ---------------------------------------------------------------- early stopping


def _run_stopper(losses, patience=20, max_epochs=200):
    stopper = EarlyStopper(patience, max_epochs)
    for loss in losses:
        if stopper.update(loss):
            break
    return stopper


def test_patience_rule():
    s = _run_stopper([1.0, 0.9] + [0.95] * 25)
    assert (s.epoch, s.best_epoch, s.stop_reason) == (22, 2, "patience")


def test_ties_do_not_count_as_improvement():
    s = _run_stopper([1.0] * 30)
    assert (s.epoch, s.best_epoch) == (21, 1)


def test_max_epochs_boundary():
    s = _run_stopper(list(np.linspace(1, 0.5, 50)), patience=20, max_epochs=30)
    assert (s.epoch, s.best_epoch, s.stop_reason) == (30, 30, "max_epochs")
    # patience and max_epochs on the same epoch: patience is reported
    s = _run_stopper([1.0] + [2.0] * 30, patience=20, max_epochs=21)
    assert (s.epoch, s.stop_reason) == (21, "patience")


# ---------------------------------------------------------------- generic loop


def _toy_fit(targets_fn, steps_per_epoch=8, epochs=60, lr=0.05, seed=0, window=3):
    rng = np.random.default_rng(seed)
    model = QuantileLstm.build("multi_catchment_no_q", ["x"], Hyperparameters(6, 1, lr, 0.0), rng)
    x_val = rng.normal(size=(window, 512, 1))
    y_val = targets_fn(x_val, rng)

    def batches(r):
        for _ in range(steps_per_epoch):
            yield Batch("toy", np.arange(64))

    def batch_loss(batch, r):
        x = r.normal(size=(window, 64, 1))
        from hydra_lstm.objectives import quantile_loss_tensor

        return quantile_loss_tensor(model.forward(Tensor(x)), targets_fn(x, r))

    def val_loss():
        with ad.no_grad():
            pred = model.forward(Tensor(x_val)).data
        return float(np.mean(cumulative_quantile_loss(y_val, pred)))

    cfg = TrainingConfig(max_epochs=epochs, patience=epochs)
    record = fit("toy", model.named_parameters(), model.train, batches, batch_loss, val_loss, cfg, lr, rng)
    return model, record, x_val, y_val


def test_constant_target_is_learned():
    model, record, x_val, _ = _toy_fit(lambda x, r: np.full(x.shape[1], 0.7), epochs=150, lr=0.01)
    pred = model.forward(Tensor(x_val)).data
    assert np.all(np.abs(pred - 0.7) <= 0.02 * 0.7)


def test_heteroscedastic_quantiles_are_calibrated():
    def target(x, r):
        last = x[-1, :, 0]
        return last + r.normal(size=last.shape) * (0.2 + 0.5 * np.abs(last))

    model, record, _, _ = _toy_fit(target, epochs=80)
    rng = np.random.default_rng(99)
    x = rng.normal(size=(3, 4000, 1))
    y = target(x, rng)
    with ad.no_grad():
        pred = model.forward(Tensor(x)).data
    assert abs(empirical_coverage(y, pred[:, 0]) - 0.9) <= 0.05
    assert abs(empirical_coverage(y, pred[:, 2]) - 0.1) <= 0.05


def test_fit_restores_best_epoch_parameters():
    model, record, x_val, y_val = _toy_fit(lambda x, r: np.full(x.shape[1], 0.7), epochs=10)
    assert record.best_val_loss == min(record.val_loss)
    assert record.val_loss[record.best_epoch - 1] == record.best_val_loss
    with ad.no_grad():
        pred = model.forward(Tensor(x_val)).data
    assert float(np.mean(cumulative_quantile_loss(y_val, pred))) == record.best_val_loss


def test_divergence_aborts_with_record():
    w = {"w": Tensor(np.zeros(1), requires_grad=True)}

    def batch_loss(batch, r):
        return ad.tensor_sum(ad.mul(w["w"], 1.0))

    with pytest.raises(TrainingError) as info:
        fit(
            "nan",
            w,
            lambda mode: None,
            lambda r: iter([Batch("x", np.arange(1))]),
            batch_loss,
            lambda: float("nan"),
            TrainingConfig(max_epochs=5),
            1e-3,
            np.random.default_rng(0),
        )
    assert info.value.record.stop_reason == "diverged"
    assert len(info.value.record.val_loss) == 1


# ---------------------------------------------------------------- architectures


def test_first_batch_loss_matches_hand_computation(datasets, split):
    trained = train_model(ModelSpec("multi_catchment_with_q", TINY, 0), datasets, split, 0,
                          TrainingConfig(window=10, batch_size=32, max_epochs=1, patience=1))
    task = trained.tasks["model"]
    idx = np.arange(400, 432)
    batch = Batch("C001", idx)
    loss = task.batch_loss(batch, np.random.default_rng(0)).item()
    with ad.no_grad():
        raw = trained.model.forward(Tensor(task.store.windows("C001", idx))).data
    by_hand = np.mean(cumulative_quantile_loss(task.store.targets["C001"][idx], raw))
    assert loss == pytest.approx(by_hand, rel=1e-13)


@pytest.mark.parametrize(
    "arch", ["single_catchment", "multi_catchment_no_q", "multi_catchment_with_q", "flag", "hydra"]
)
def test_training_is_deterministic(tmp_path, datasets, split, arch):
    outs = []
    for k in range(2):
        trained = train_model(ModelSpec(arch, TINY, 5), datasets, split, 5, FAST)
        save_checkpoints(trained.model, tmp_path / str(k))
        outs.append(trained.record.to_dict())
    assert outs[0] == outs[1]
    for f in sorted((tmp_path / "0").iterdir()):
        assert f.read_bytes() == (tmp_path / "1" / f.name).read_bytes()


def test_phase_two_requires_phase_one(datasets, split):
    trained = train_model(ModelSpec("multi_catchment_no_q", TINY, 0), datasets, split, 0, FAST)
    with pytest.raises(OrderingError):
        train_single_heads(trained, datasets, split, 0)


@pytest.fixture(scope="module")
def phase1(datasets, split):
    return lambda: train_hydra_phase1(ModelSpec("hydra", TINY, 2), datasets, split, 2, FAST)


def test_phase_two_freezes_body_and_isolates_gradients(datasets, split, phase1):
    trained = phase1()
    body = {k: p.data.tobytes() for k, p in trained.model.body.named_parameters().items()}
    train_single_heads(trained, datasets, split, 2)
    for name, p in trained.model.body.named_parameters().items():
        assert p.data.tobytes() == body[name]
        assert p.grad is None or not p.grad.any()
    assert sorted(trained.model.single_heads) == ["C000", "C001", "C002"]


def test_phase_two_order_independent(datasets, split, phase1):
    a = train_single_heads(phase1(), datasets, split, 2, ["C000", "C001", "C002"])
    b = train_single_heads(phase1(), datasets, split, 2, ["C002", "C000", "C001"], jobs=2)
    pa, pb = a.model.named_parameters(), b.model.named_parameters()
    assert sorted(pa) == sorted(pb)
    for name in pa:
        assert pa[name].data.tobytes() == pb[name].data.tobytes()
    assert a.record.to_dict() == b.record.to_dict()


def test_precomputed_encodings_match_on_the_fly(datasets, split, phase1):
    cfg = TrainingConfig(window=10, batch_size=256, max_epochs=2, patience=2, precompute_encodings=True)
    trained = phase1()
    trained.config = cfg
    train_single_heads(trained, datasets, split, 2, ["C001"])
    task = trained.tasks["head_C001"]
    idx = np.arange(500, 560)
    from hydra_lstm.training import EncodingCache

    task.cache = EncodingCache(trained.model.body, task.shared, "C001", idx, 16)
    cached = task.predict("C001", idx)
    fresh = task.predict_on_the_fly(idx)
    assert np.abs(cached - fresh).max() <= 1e-10
    task.cache = None
    assert np.abs(task.predict("C001", idx) - fresh).max() <= 1e-10


def test_single_head_with_noise_extra_matches_multi_head():
    # a longer record so a head trained on one catchment is not data-starved
    long_record = synthesize_catchments(2, 12, seed=11)
    split = make_split_plans(record_years(long_record), 1)[0]
    rng = np.random.default_rng(0)
    noisy = []
    for d in long_record:
        dyn = dict(d.dynamic, noise_mm_day=rng.normal(size=len(d.dates)))
        noisy.append(CatchmentDataset(d.catchment_id, d.dates, dyn, d.static))
    cfg = TrainingConfig(window=10, batch_size=128, max_epochs=40, patience=8)
    spec = ModelSpec("hydra", TINY, 1, extra_variables=("noise_mm_day",))
    trained = train_hydra_phase1(spec, noisy, split, 1, cfg)
    p1 = trained.tasks["phase1"]
    train_single_heads(trained, noisy, split, 1)
    val_years = split.validation_years
    pools_all = p1.store.pools(val_years, tuple(sorted(split.training_years + val_years)))
    for cid in sorted(trained.model.single_heads):
        pools = {cid: pools_all[cid]}
        multi = p1.validation_loss(pools)
        single = trained.tasks[f"head_{cid}"].validation_loss(pools)
        assert single <= 1.05 * multi


def test_missing_extra_variable_is_rejected(datasets, split, phase1):
    trained = phase1()
    trained.spec = ModelSpec("hydra", TINY, 2, extra_variables=("upstream_discharge_m3_s",))
    with pytest.raises(ConfigurationError):
        train_single_heads(trained, datasets, split, 2, ["C002"])


# ---------------------------------------------------------------- cross-validation and sweep


def test_single_fold_crossval_and_recomputation(datasets):
    result = cross_validate(ModelSpec("multi_catchment_with_q", TINY, 0), datasets, 1, 0, FAST)
    assert len(result.folds) == 1
    frame = result.predictions
    assert set(pd_years(frame)) == {result.folds[0].split.test_year}
    agg = result.reports["multi_catchment_with_q"].aggregate
    y = frame["observed"].to_numpy()
    l_model = cumulative_quantile_loss(y, frame[["q10", "q50", "q90"]].to_numpy())
    l_clim = cumulative_quantile_loss(y, frame[["clim_q10", "clim_q50", "clim_q90"]].to_numpy())
    assert agg["cqes"] == pytest.approx(1 - l_model.mean() / l_clim.mean(), abs=1e-12)


def pd_years(frame):
    return frame["date"].str[:4].astype(int).unique()


def test_folds_have_distinct_test_years(datasets):
    result = cross_validate(ModelSpec("multi_catchment_no_q", TINY, 0), datasets, 3, 0,
                            TrainingConfig(window=10, batch_size=512, max_epochs=1, patience=1), jobs=2)
    tests = [f.split.test_year for f in result.folds]
    assert len(set(tests)) == 3
    assert sorted(pd_years(result.predictions)) == sorted(tests)
    again = evaluate_predictions(result.predictions)
    assert again["multi_catchment_no_q"].to_dict() == result.reports["multi_catchment_no_q"].to_dict()


def test_grid_of_one_and_ranking(datasets):
    years = record_years(datasets)
    cfg = TrainingConfig(window=10, batch_size=512, max_epochs=2, patience=2)
    one = grid_sweep("multi_catchment_no_q", datasets, years[-2:], {"hidden_size": [3], "num_layers": [1],
                     "learning_rate": [1e-2], "dropout": [0.0]}, 0, cfg)
    assert len(one) == 1 and one[0]["rank"] == 1 and one[0]["hyperparameters"]["hidden_size"] == 3
    grid = {"hidden_size": [2, 4], "num_layers": [1], "learning_rate": [1e-2, 1e-5], "dropout": [0.0]}
    ranked = grid_sweep("multi_catchment_no_q", datasets, years[-2:], grid, 0, cfg)
    losses = [r["val_loss"] for r in ranked]
    assert losses == sorted(losses) and len(ranked) == 4


def test_expand_grid_size():
    from hydra_lstm.models import SEARCH_GRIDS

    assert len(expand_grid(SEARCH_GRIDS["hydra"])) == 3 * 3 * 3 * 2 * 2 * 3
