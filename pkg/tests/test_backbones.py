import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import fdqa.tensor as T
from fdqa.backbones import (
    ConfigError,
    MBConvStage,
    MicroDenseConfig,
    MicroEffConfig,
    ScalingCoefficients,
    build,
    build_micro_densenet,
    build_micro_efficientnet,
    compound_scale,
    dense_block_channels,
    describe,
    from_description,
    mbconv_block,
)
from fdqa.tensor import GradientTape, RunningStats, Tensor, backward, float64_mode

from _oracles import numeric_grad, rel_error, t64

TINY_DENSE = MicroDenseConfig(input_resolution=16, stem_channels=4, blocks=((2, 3), (2, 3)), head_hidden=(5,))
TINY_EFF = MicroEffConfig(
    input_resolution=16, stem_channels=4, blocks=(MBConvStage(1, 4, 1, 1), MBConvStage(2, 6, 2, 2)), head_hidden=(5,), stem_stride=1
)


def image(seed, r=16, n=None):
    shape = (3, r, r) if n is None else (n, 3, r, r)
    return np.random.default_rng(seed).normal(size=shape).astype(np.float32)


def to_float64(net):
    for k, p in net.params.items():
        net.params[k] = t64(p.data)
    return net


def randomize_stats(net, rng):
    for st_ in net.stats.values():
        c = st_.mean.shape[0]
        st_.mean = rng.normal(0, 0.3, c).astype(np.float32)
        st_.var = rng.uniform(0.5, 2.0, c).astype(np.float32)
    # fresh init puts BN shifts and head biases at exactly 0; with a single
    # training-mode image the pooled BN output then sits on a ReLU kink
    for k, p in net.params.items():
        if k.endswith((".beta", ".gamma", ".b")):
            p.data = (p.data + rng.normal(0, 0.3, p.shape)).astype(np.float32)


# --------------------------------------------------------------------------
# dense analog


def test_dense_block_example_channels():
    net = build_micro_densenet(MicroDenseConfig(input_resolution=8, stem_channels=8, blocks=((4, 4),), head_hidden=()), 2)
    cap = {}
    net.forward(Tensor(image(0, 8)), capture=cap)
    assert cap["features"].shape[0] == 8 + 4 * 4 == dense_block_channels(8, 4, 4)


def test_dense_layer_three_sees_two_predecessors():
    net = build_micro_densenet(MicroDenseConfig(stem_channels=8, blocks=((4, 4),)), 2)
    assert net.params["block0.layer2.conv.w"].shape[1] == 8 + 2 * 4
    assert net.params["block0.layer0.conv.w"].shape[1] == 8


def _expected_dense_channels(cfg):
    c = cfg.stem_channels
    for b, (n, k) in enumerate(cfg.blocks):
        c = c + n * k
        if b < len(cfg.blocks) - 1:
            c = max(1, int(np.floor(c * cfg.transition_compression)))
    return c


@pytest.mark.parametrize("seed", range(50))
def test_dense_channel_law_random_configs(seed):
    rng = np.random.default_rng(seed)
    blocks = tuple((int(rng.integers(1, 5)), int(rng.integers(1, 7))) for _ in range(rng.integers(1, 4)))
    cfg = MicroDenseConfig(
        input_resolution=16, stem_channels=int(rng.integers(1, 9)), blocks=blocks,
        transition_compression=float(rng.choice([0.5, 0.75, 1.0])), head_hidden=(),
    )
    net = build_micro_densenet(cfg, 2, seed)
    # per-block law, read off the tensors that actually flow through the block
    c = cfg.stem_channels
    for b, (n, k) in enumerate(blocks):
        for layer in range(n):
            assert net.params[f"block{b}.layer{layer}.conv.w"].shape[1] == c + layer * k
        c_out = c + n * k
        assert net.stats[f"trans{b}.bn" if b < len(blocks) - 1 else "final.bn"].mean.shape == (c_out,)
        if b < len(blocks) - 1:
            c = net.params[f"trans{b}.conv.w"].shape[0]
    cap = {}
    net.forward(Tensor(image(seed)), capture=cap)
    assert cap["features"].shape[0] == _expected_dense_channels(cfg)


def test_dense_forward_shape_and_finite():
    net = build("dense", 2, seed=1)
    out = net.forward(Tensor(image(1, 64)))
    assert out.shape == (2,) and np.all(np.isfinite(out.data))
    assert net.forward(Tensor(image(1, 64, n=3))).shape == (3, 2)


def test_dense_too_small_names_stage():
    cfg = MicroDenseConfig(input_resolution=8, blocks=((1, 2),) * 5)
    with pytest.raises(ConfigError, match="transition 3"):
        build_micro_densenet(cfg, 2)


def test_input_resolution_checked():
    net = build("dense", 2, config=TINY_DENSE)
    with pytest.raises(T.ShapeError):
        net.forward(Tensor(image(0, 32)))


# --------------------------------------------------------------------------
# efficient analog


def test_mbconv_zero_project_is_identity():
    cfg = MicroEffConfig(input_resolution=16, stem_channels=6, blocks=(MBConvStage(3, 6, 1, 1),), head_hidden=(), stem_stride=1)
    net = build_micro_efficientnet(cfg, 2)
    net.params["stage0.block0.project.w"] = Tensor(np.zeros_like(net.params["stage0.block0.project.w"].data))
    x = Tensor(np.random.default_rng(0).normal(size=(2, 6, 8, 8)))
    for training in (False, True):
        out = mbconv_block(net, "stage0.block0", x, 3, 1, training)
        np.testing.assert_array_equal(out.data, x.data)


def test_mbconv_expansion_one_has_no_expand():
    net = build("eff", 2, config=TINY_EFF)
    assert "stage0.block0.expand.w" not in net.params
    assert "stage1.block0.expand.w" in net.params


def _eff_param_count(cfg, num_outputs):
    """Closed form from the declared layer dimensions."""
    total = 3 * 9 * cfg.stem_channels + 2 * cfg.stem_channels
    c = cfg.stem_channels
    for b in cfg.blocks:
        for _ in range(b.repeats):
            h = c * b.expansion_ratio
            if b.expansion_ratio != 1:
                total += c * h + 2 * h
            total += 9 * h + 2 * h
            total += h * b.out_channels + 2 * b.out_channels
            c = b.out_channels
    widths = [c, *cfg.head_hidden, num_outputs]
    total += sum(widths[i] * widths[i + 1] + widths[i + 1] for i in range(len(widths) - 1))
    return total


@pytest.mark.parametrize("cfg", [TINY_EFF, MicroEffConfig(), MicroEffConfig(blocks=(MBConvStage(2, 8, 2, 3),), head_hidden=(7, 3))])
def test_eff_parameter_count_closed_form(cfg):
    assert build("eff", 2, config=cfg).num_parameters() == _eff_param_count(cfg, 2)


def test_dense_parameter_count_closed_form():
    cfg = TINY_DENSE
    c, total = cfg.stem_channels, 3 * 9 * cfg.stem_channels
    for b, (n, k) in enumerate(cfg.blocks):
        for layer in range(n):
            total += 2 * (c + layer * k) + (c + layer * k) * 9 * k
        c += n * k
        if b < len(cfg.blocks) - 1:
            total += 2 * c + c * (c // 2)
            c //= 2
    total += 2 * c + c * 5 + 5 + 5 * 3 + 3
    assert build("dense", 3, config=cfg).num_parameters() == total


def test_eff_too_small_names_stage():
    cfg = MicroEffConfig(input_resolution=8, blocks=(MBConvStage(1, 4, 2, 1), MBConvStage(1, 4, 2, 1)))
    with pytest.raises(ConfigError, match="stage1.block0"):
        build_micro_efficientnet(cfg, 2)


def test_eff_forward_shape():
    out = build("eff", 2, seed=3).forward(Tensor(image(2, 64)))
    assert out.shape == (2,) and np.all(np.isfinite(out.data))


# --------------------------------------------------------------------------
# compound scaling


def test_compound_scale_examples():
    base = MicroEffConfig(blocks=(MBConvStage(4, 16, 1, 10),))
    assert compound_scale(base, ScalingCoefficients(1.2, 1.1, 1.15, 0)) is base
    scaled = compound_scale(base, ScalingCoefficients(alpha=1.2, beta=1.1, phi=1))
    assert scaled.blocks[0].repeats == 12
    assert scaled.blocks[0].out_channels == 20
    assert compound_scale(MicroEffConfig(), ScalingCoefficients(gamma=1.15, phi=1)).input_resolution == 74


@given(
    st.floats(1.0, 2.0), st.floats(1.0, 2.0), st.floats(1.0, 2.0), st.integers(0, 3),
    st.integers(1, 12), st.integers(1, 64), st.integers(8, 128),
)
@settings(max_examples=200)
def test_compound_scale_rules(a, b, g, phi, reps, ch, res):
    base = MicroEffConfig(input_resolution=res, blocks=(MBConvStage(2, ch, 1, reps),))
    out = compound_scale(base, ScalingCoefficients(a, b, g, phi))
    if phi == 0:
        assert out == base
        return
    blk = out.blocks[0]
    assert blk.repeats >= reps and blk.repeats - reps * a**phi < 1 + 1e-6
    assert blk.out_channels % 4 == 0 and blk.out_channels >= ch * b**phi - 1e-6
    assert blk.out_channels - ch * b**phi < 4 + 1e-6
    assert out.input_resolution % 2 == 0 and abs(out.input_resolution - res * g**phi) <= 1 + 1e-9


def test_scaling_coefficients_validated():
    with pytest.raises(ConfigError):
        ScalingCoefficients(alpha=0.9)
    with pytest.raises(ConfigError):
        ScalingCoefficients(phi=-1)


# --------------------------------------------------------------------------
# determinism, descriptor, final-conv handle


@pytest.mark.parametrize("kind", ["dense", "eff"])
def test_same_seed_same_network(kind):
    a, b = build(kind, 2, seed=9, resolution=32), build(kind, 2, seed=9, resolution=32)
    assert list(a.params) == list(b.params)
    for k in a.params:
        assert a.params[k].data.tobytes() == b.params[k].data.tobytes()
    x = Tensor(image(4, 32))
    assert a.forward(x).data.tobytes() == b.forward(x).data.tobytes()
    c = build(kind, 2, seed=10, resolution=32)
    assert any(a.params[k].data.tobytes() != c.params[k].data.tobytes() for k in a.params)


@pytest.mark.parametrize("kind,cfg", [("dense", TINY_DENSE), ("eff", TINY_EFF), ("dense", None), ("eff", None)])
def test_descriptor_round_trip(kind, cfg):
    net = build(kind, 3, seed=5, config=cfg)
    again = from_description(describe(net))
    assert again.config == net.config and again.kind == kind and again.num_outputs == 3
    assert describe(again) == describe(net)


@pytest.mark.parametrize("kind", ["dense", "eff"])
def test_final_conv_handle_feeds_head(kind):
    net = build(kind, 2, seed=2, resolution=32)
    cap = {}
    x = Tensor(image(6, 32))
    out = net.forward(x, capture=cap)
    feats = cap[net.final_conv]
    assert feats.data.ndim == 3 and min(feats.shape[1:]) >= 1
    assert net.head(feats).data.tobytes() == out.data.tobytes()
    assert net.features(x).data.tobytes() == feats.data.tobytes()


def test_parameter_names_unique_and_ordered():
    net = build("dense", 2)
    names = list(net.params)
    assert len(names) == len(set(names))
    assert names[0] == "stem.conv.w" and names[-1] == "head.fc1.b"


# --------------------------------------------------------------------------
# end-to-end gradients (100 seeds per family)


def _e2e_check(kind, cfg, seed):
    rng = np.random.default_rng(5000 + seed)
    net = build(kind, 2, seed=seed, config=cfg)
    randomize_stats(net, rng)
    training = seed % 2 == 1
    with float64_mode():
        to_float64(net)
        # two images: a single training-mode image makes the last BN's pooled
        # output constant, leaving nothing upstream to check
        x = Tensor(rng.normal(size=(2, 3, 16, 16)))

        def logit():
            saved = {k: (s.mean, s.var) for k, s in net.stats.items()}
            out = T.sum_all(T.take(net.forward(x, training=training), 1))
            for k, (m, v) in saved.items():
                net.stats[k].mean, net.stats[k].var = m, v
            return out

        with GradientTape() as tape:
            y = logit()
        g = backward(tape, y)
        names = list(net.params)
        picks = rng.choice(len(names), size=4, replace=False)
        analytic, numeric = [], []
        for i in picks:
            p = net.params[names[i]]
            coords = rng.choice(p.size, size=min(3, p.size), replace=False)
            num = numeric_grad(lambda: logit().item(), p.data, 1e-6, coords)
            analytic.append(g.array(p).reshape(-1)[coords])
            numeric.append(num.reshape(-1)[coords])
        coords = rng.choice(x.size, size=3, replace=False)
        num = numeric_grad(lambda: logit().item(), x.data, 1e-6, coords)
        analytic.append(g.array(x).reshape(-1)[coords])
        numeric.append(num.reshape(-1)[coords])
    a, n = np.concatenate(analytic), np.concatenate(numeric)
    # a head whose hidden ReLUs are all off has an exactly-zero gradient; the
    # numeric side is then pure differencing noise, so accept it absolutely
    if np.abs(n).max() < 1e-8:
        return float(np.abs(a - n).max() * 1e-2 / 1e-8)
    return rel_error(a, n)


@pytest.mark.parametrize("seed", range(100))
def test_grad_end_to_end_dense(seed):
    assert _e2e_check("dense", TINY_DENSE, seed) < 1e-2


@pytest.mark.parametrize("seed", range(100))
def test_grad_end_to_end_eff(seed):
    assert _e2e_check("eff", TINY_EFF, seed) < 1e-2
