import math

import numpy as np
import pytest

from fdqa.backbones import MBConvStage, MicroDenseConfig, MicroEffConfig, build
from fdqa.data import preprocess, render_fundus
from fdqa.hierarchy import (
    PREDICTION_HEADER,
    Comparison,
    HierarchicalClassifier,
    StageModel,
    StageSpec,
    TrainConfig,
    TrainingError,
    build_flat_baseline,
    load_hierarchy,
    predict,
    predict_batch,
    predict_flat,
    predictions_csv,
    recalibrate_bn,
    relabel_for_stage,
    route,
    route_labels,
    save_hierarchy,
    stage_probabilities,
    stage_targets,
    sweep_thresholds,
    threshold_grid,
    train_flat,
    train_hierarchy,
    train_stage,
)
from fdqa.labels import STAGES, QualityLabel, StageRole
from fdqa.metrics import confusion_from_arrays
import fdqa.tensor as T
from fdqa.tensor import Tensor

G, U, X = QualityLabel.GOOD, QualityLabel.USABLE, QualityLabel.UNUSABLE
M1, M2, M3 = StageRole.HIGH_VS_LOW, StageRole.GOOD_VS_USABLE, StageRole.USABLE_VS_UNUSABLE

TINY_DENSE = MicroDenseConfig(input_resolution=16, stem_channels=4, blocks=((2, 3),), head_hidden=(6,))
TINY_EFF = MicroEffConfig(input_resolution=16, stem_channels=4, blocks=(MBConvStage(2, 6, 2, 1),), head_hidden=(6,))


def tiny_hierarchy(seed=0, kinds=("dense", "dense", "eff")):
    cfgs = {"dense": TINY_DENSE, "eff": TINY_EFF}
    return HierarchicalClassifier(
        *(StageModel(role, build(k, 2, seed=seed + i, config=cfgs[k])) for i, (role, k) in enumerate(zip(STAGES, kinds)))
    )


def random_images(n, seed=0, r=16):
    return np.random.default_rng(seed).normal(size=(n, 3, r, r)).astype(np.float32)


def check_prediction(p):
    assert len(p.path) == 2 and p.path[0].role is M1
    assert p.explainer_role is p.path[1].role
    if p.path[1].role is M2:
        assert p.label in (G, U)
    else:
        assert p.path[1].role is M3 and p.label in (U, X)
    assert p.path[0].decision == ("high" if p.path[1].role is M2 else "low")


# --------------------------------------------------------------------------
# relabeling


def test_relabel_examples():
    assert relabel_for_stage(G, M1) == 1
    assert relabel_for_stage(U, M1) is None
    assert relabel_for_stage(X, M1) == 0
    assert relabel_for_stage(U, M2) == 0
    assert relabel_for_stage(G, M2) == 1
    assert relabel_for_stage(X, M2) is None
    assert relabel_for_stage(U, M3) == 1
    assert relabel_for_stage(X, M3) == 0
    assert relabel_for_stage(G, M3) is None


def test_each_label_excluded_exactly_once():
    for lab in QualityLabel:
        assert sum(relabel_for_stage(lab, role) is None for role in STAGES) == 1


def test_stage1_usable_switch():
    assert relabel_for_stage(U, M1, "positive") == 1
    assert relabel_for_stage(U, M1, "negative") == 0
    assert relabel_for_stage(U, M2, "positive") == 0  # only Model-1 is affected
    with pytest.raises(ValueError):
        relabel_for_stage(U, M1, "both")


def test_stage_targets():
    labels = np.array([0, 1, 2, 2, 0, 1])
    keep, t = stage_targets(labels, M1)
    assert keep.tolist() == [0, 2, 3, 4] and t.tolist() == [1, 0, 0, 1]
    keep, t = stage_targets(labels, M3)
    assert keep.tolist() == [1, 2, 3, 5] and t.tolist() == [1, 0, 0, 1]


# --------------------------------------------------------------------------
# routing


def test_route_examples():
    p = route(0.8, 0.3, math.nan)
    assert p.label is U
    assert [(s.role, s.decision) for s in p.path] == [(M1, "high"), (M2, "usable")]
    p = route(0.2, math.nan, 0.1)
    assert p.label is X and p.explainer_role is M3
    p = route(0.9, 0.9, math.nan)
    assert p.label is G and p.explainer_role is M2
    assert route(0.5, 0.5, 0.5).label is G  # ties go to the positive side


def test_routing_invariants_randomized():
    rng = np.random.default_rng(0)
    probs = rng.random((10_000, 3))
    thr = rng.uniform(0.01, 0.99, (10_000, 3))
    for p, t in zip(probs, thr):
        pred = route(*p, t)
        check_prediction(pred)
        assert int(pred.label) == route_labels(p[None], t)[0]


def test_route_labels_matches_route():
    probs = np.random.default_rng(1).random((500, 3))
    codes = route_labels(probs, (0.4, 0.6, 0.5))
    assert codes.tolist() == [int(route(*p, (0.4, 0.6, 0.5)).label) for p in probs]


def test_extreme_model1_thresholds():
    hc = tiny_hierarchy()
    X_ = random_images(40)
    low = predict_batch(hc.with_thresholds((1e-9, 0.5, 0.5)), X_)
    assert all(p.explainer_role is M2 for p in low)
    high = predict_batch(hc.with_thresholds((1 - 1e-9, 0.5, 0.5)), X_)
    assert all(p.explainer_role is M3 for p in high)


def test_predict_runs_branch_and_matches_batch():
    hc = tiny_hierarchy(3)
    X_ = random_images(12, 5)
    batch = predict_batch(hc, X_)
    for x, b in zip(X_, batch):
        p = predict(hc, Tensor(x))
        check_prediction(p)
        assert p.label is b.label
        assert p.path[0].probability == pytest.approx(b.path[0].probability, abs=1e-6)
        assert p.path[1].probability == pytest.approx(b.path[1].probability, abs=1e-6)
    assert predict(hc, Tensor(X_[0])) == predict(hc, Tensor(X_[0]))


def test_predict_resolution_mismatch():
    with pytest.raises(T.ShapeError, match="expects 3 x 16 x 16"):
        predict(tiny_hierarchy(), Tensor(random_images(1, r=32)[0]))


def test_parallel_inference_matches_serial():
    hc = tiny_hierarchy(1)
    X_ = random_images(70, 2)
    np.testing.assert_array_equal(stage_probabilities(hc, X_), stage_probabilities(hc, X_, workers=3, batch_size=16))


def test_stage_model_validation():
    net = build("dense", 2, config=TINY_DENSE)
    for t in (0.0, 1.0):
        with pytest.raises(ValueError):
            StageModel(M1, net, t)
    with pytest.raises(ValueError):
        StageModel(M1, build("dense", 3, config=TINY_DENSE))
    hc = tiny_hierarchy()
    with pytest.raises(ValueError):
        HierarchicalClassifier(hc.model2, hc.model1, hc.model3)


# --------------------------------------------------------------------------
# threshold sweeps


def test_sweep_single_triple_equals_plain():
    hc = tiny_hierarchy(2)
    X_ = random_images(60, 3)
    y = np.random.default_rng(3).integers(0, 3, 60)
    out = sweep_thresholds(hc, X_, y, [(0.5, 0.5, 0.5)])
    assert len(out) == 1
    plain = confusion_from_arrays(y, [int(p.label) for p in predict_batch(hc, X_)])
    assert out[0][1] == plain


def test_sweep_cardinality_and_monotone_gate():
    hc = tiny_hierarchy(4)
    X_ = random_images(80, 4)
    y = np.random.default_rng(4).integers(0, 3, 80)
    axis = [0.3, 0.4, 0.5, 0.6, 0.7]
    grid = threshold_grid(axis)
    out = sweep_thresholds(hc, X_, y, grid)
    assert len(out) == 125
    assert all(C.total == 80 for _, C in out)
    probs = stage_probabilities(hc, X_)
    routed = [int(np.sum(probs[:, 0] >= t1)) for t1 in np.linspace(0.01, 0.99, 50)]
    assert all(a >= b for a, b in zip(routed, routed[1:]))


def test_sweep_errors():
    hc = tiny_hierarchy()
    with pytest.raises(ValueError, match="empty"):
        sweep_thresholds(hc, random_images(4), np.zeros(4, int), [])
    with pytest.raises(ValueError):
        sweep_thresholds(hc, random_images(4), np.zeros(4, int), [(0.5, 1.0, 0.5)])


def test_threshold_grid_three_axes():
    g = threshold_grid([0.2], [0.4, 0.6], [0.5])
    assert g == [(0.2, 0.4, 0.5), (0.2, 0.6, 0.5)]


# --------------------------------------------------------------------------
# training


@pytest.fixture(scope="module")
def toy_set():
    """Good fundus images vs heavily occluded ones at resolution 32."""
    rng = np.random.default_rng(11)
    X_, y = [], []
    for i in range(200):
        bad = i % 2 == 1
        s = render_fundus(rng, 32, 0.5 if bad else 0.0, kinds=("occlusion",))
        X_.append(preprocess(s.image, 32).data)
        y.append(2 if bad else 0)
    return np.stack(X_), np.array(y)


TOY_NET = MicroDenseConfig(input_resolution=32, stem_channels=4, blocks=((2, 4),), head_hidden=(8,))


def test_zero_epochs_leaves_params(toy_set):
    X_, y = toy_set
    model = StageModel(M1, build("dense", 2, seed=0, config=TOY_NET))
    before = {k: p.data.copy() for k, p in model.network.params.items()}
    _, res = train_stage(model, X_, y, TrainConfig(epochs=0))
    assert res.losses == []
    for k, p in model.network.params.items():
        assert np.array_equal(p.data, before[k])


def test_toy_training_reduces_loss(toy_set):
    X_, y = toy_set
    model = StageModel(M1, build("dense", 2, seed=0, config=TOY_NET))
    _, res = train_stage(model, X_, y, TrainConfig(epochs=12, lr=3e-3), seed=0)
    assert res.num_train == 200 and res.class_counts == (100, 100)
    ratio = res.losses[-1] / res.initial_loss
    print(f"toy final/initial loss ratio = {ratio:.4f}")
    assert ratio < 0.1


def test_recalibrated_stats_are_population_stats(toy_set):
    X_, _ = toy_set
    net = build("dense", 2, seed=0, config=TOY_NET)
    # one batch covering the whole set: inference with the recalibrated stats
    # reproduces the training-mode forward (every BN here pools 8 x 32 x 32
    # values, so the unbiased-variance factor is ~1.0001)
    recalibrate_bn(net, X_[:8], batch_size=8)
    assert all(st.count is None for st in net.stats.values())
    train_out = net.forward(Tensor(X_[:8]), training=True).data
    np.testing.assert_allclose(net.forward(Tensor(X_[:8])).data, train_out, rtol=0, atol=1e-3)


def test_recalibration_averages_batches():
    net = build("eff", 2, seed=0, config=TINY_EFF)
    X_ = random_images(32, 9)
    recalibrate_bn(net, X_, batch_size=8)
    # stem BN sees the stem conv output; its population mean over equal
    # batches is the plain mean of the per-batch means
    conv = T.conv2d(Tensor(X_), net.params["stem.conv.w"], stride=2, padding=1).data
    np.testing.assert_allclose(net.stats["stem.bn"].mean, conv.mean(axis=(0, 2, 3)), rtol=1e-4, atol=1e-5)


def test_training_deterministic(toy_set):
    X_, y = toy_set
    nets = []
    for _ in range(2):
        model = StageModel(M3, build("eff", 2, seed=1, config=MicroEffConfig(input_resolution=32, stem_channels=4,
                                                                              blocks=(MBConvStage(2, 6, 2, 1),), head_hidden=())))
        y3 = np.where(y == 0, 1, 2)  # Usable vs Unusable stand-in
        train_stage(model, X_[:48], y3[:48], TrainConfig(epochs=2), seed=7)
        nets.append(model.network)
    for k in nets[0].params:
        assert nets[0].params[k].data.tobytes() == nets[1].params[k].data.tobytes()


def test_missing_class_error():
    model = StageModel(M2, build("dense", 2, config=TINY_DENSE))
    with pytest.raises(TrainingError, match="negative=0"):
        train_stage(model, random_images(6), np.array([0, 0, 2, 2, 0, 2]), TrainConfig(epochs=1))


def test_freeze_prefix(toy_set):
    X_, y = toy_set
    model = StageModel(M1, build("dense", 2, seed=0, config=TOY_NET))
    stem = model.network.params["stem.conv.w"].data.copy()
    head = model.network.params["head.fc1.w"].data.copy()
    train_stage(model, X_[:32], y[:32], TrainConfig(epochs=1, freeze_prefix=("stem.", "block0.")))
    assert np.array_equal(model.network.params["stem.conv.w"].data, stem)
    assert not np.array_equal(model.network.params["head.fc1.w"].data, head)


def _labels(n, seed):
    return np.random.default_rng(seed).permutation(np.arange(n) % 3)


@pytest.mark.parametrize("kinds", [("dense", "dense", "eff"), ("dense",) * 3, ("eff",) * 3])
def test_train_hierarchy_combinations(kinds):
    cfgs = {"dense": TINY_DENSE, "eff": TINY_EFF}
    y = _labels(30, 0)
    hc, res = train_hierarchy(random_images(30), y, [StageSpec(k, cfgs[k]) for k in kinds], TrainConfig(epochs=1), seed=3)
    assert tuple(m.network.kind for m in hc.stages) == kinds
    assert [m.role for m in hc.stages] == list(STAGES)
    for role in STAGES:
        keep, _ = stage_targets(y, role)
        assert res[role].num_train == len(keep) == 20
    # stage i is seeded with seed + i
    assert [m.network.seed for m in hc.stages] == [3, 4, 5]


def test_default_backbones():
    from fdqa.hierarchy import DEFAULT_BACKBONES

    assert DEFAULT_BACKBONES == ("dense", "dense", "eff")


def test_parallel_training_matches_serial():
    y = _labels(24, 1)
    X_ = random_images(24, 1)
    specs = [StageSpec("dense", TINY_DENSE), StageSpec("dense", TINY_DENSE), StageSpec("eff", TINY_EFF)]
    a, _ = train_hierarchy(X_, y, specs, TrainConfig(epochs=1), seed=0)
    b, _ = train_hierarchy(X_, y, specs, TrainConfig(epochs=1), seed=0, workers=3)
    for ma, mb in zip(a.stages, b.stages):
        for k in ma.network.params:
            assert ma.network.params[k].data.tobytes() == mb.network.params[k].data.tobytes()


# --------------------------------------------------------------------------
# flat baseline, persistence, export


def test_flat_argmax():
    assert predict_flat(np.array([2.0, 0.1, -1.0])) == 0
    assert predict_flat(np.array([[0.5, 0.5, 0.1], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0]])).tolist() == [0, 1, 0]


def test_flat_training_runs():
    net = build_flat_baseline("dense", seed=0, config=TINY_DENSE)
    assert net.num_outputs == 3
    res = train_flat(net, random_images(12), _labels(12, 2), TrainConfig(epochs=1))
    assert res.class_counts == (4, 4, 4) and len(res.losses) == 1


def test_save_load_hierarchy(tmp_path):
    hc = tiny_hierarchy(6).with_thresholds((0.4, 0.55, 0.6))
    save_hierarchy(hc, tmp_path / "h")
    again = load_hierarchy(tmp_path / "h")
    assert again.thresholds == (0.4, 0.55, 0.6)
    X_ = random_images(10, 6)
    np.testing.assert_array_equal(stage_probabilities(hc, X_), stage_probabilities(again, X_))


def test_predictions_csv():
    preds = [route(0.8, 0.3, math.nan), route(0.2, math.nan, 0.9)]
    text = predictions_csv(["a.ppm", "b.ppm"], preds, [1, 2], seed=4)
    lines = text.splitlines()
    assert lines[0] == "# seed=4" and lines[1] == PREDICTION_HEADER
    assert lines[2] == "a.ppm,1,1,0.800000,model2,0.300000"
    assert lines[3] == "b.ppm,1,2,0.200000,model3,0.900000"


def test_comparison_report():
    h = confusion_from_arrays([0, 1, 2, 2], [0, 1, 2, 1])
    f = confusion_from_arrays([0, 1, 2, 2], [0, 0, 2, 1])
    text = Comparison(h, f, {"seed": "0"}).to_text()
    assert "hierarchical" in text and "flat" in text and "seed: 0" in text
    assert "0.7500" in text and "0.5000" in text
