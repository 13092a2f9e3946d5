import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmscene import quantizer as qz
from mmscene.config import ModelConfig
from mmscene.model import Model


@pytest.fixture(scope="module")
def small_calib():
    """An untrained default model and statistics from a dozen random inputs."""
    cfg = ModelConfig()
    model = Model.init(cfg, 11)
    r = np.random.default_rng(0)
    images = r.uniform(-1, 1, (12, 3, 32, 32))
    tokens = r.integers(0, 63, (12, 16))
    tokens[:, 12:] = cfg.pad_id
    vectors = r.dirichlet(np.ones(5), 12)
    return model, qz.collect_calibration_stats(model, images, tokens, vectors, batch_size=5), \
        (images, tokens, vectors)


# ---------------------------------------------------------------- scales

def test_channel_scale_examples():
    assert qz.channel_scale([15.0], 0.99, 4) == (1.0, False)
    s, deg = qz.channel_scale([1.5, 1.5], 0.5, 4)
    assert s == pytest.approx(0.1, abs=1e-15) and not deg
    assert qz.channel_scale([0.0, 0.0, 0.0], 0.99, 4) == (1e-8, True)
    with pytest.raises(qz.QuantizationError):
        qz.channel_scale([], 0.99, 4)


def test_vectorised_scales_agree_with_single_channel(rng):
    samples = np.abs(rng.normal(size=(40, 6)))
    samples[:, 2] = 0
    s, deg = qz.channel_scales(samples, 0.9, 4)
    for i in range(6):
        one, d = qz.channel_scale(samples[:, i], 0.9, 4)
        assert s[i] == pytest.approx(one, rel=1e-7) and deg[i] == d


def test_scales_monotone_in_alpha(rng):
    samples = np.abs(rng.normal(size=(64, 10)))
    alphas = np.linspace(0.05, 1.0, 20)
    rows = np.array([qz.channel_scales(samples, a, 4)[0] for a in alphas])
    assert np.all(np.diff(rows, axis=0) >= 0)


def test_policy_validation():
    with pytest.raises(qz.QuantizationError):
        qz.QuantPolicy(bits=1)
    with pytest.raises(qz.QuantizationError):
        qz.QuantPolicy(bits=9)
    with pytest.raises(qz.QuantizationError):
        qz.QuantPolicy(alpha=0.0)
    with pytest.raises(qz.QuantizationError):
        qz.QuantPolicy(mode="inverted")


# ----------------------------------------------------- quantize / packing

def test_quantize_examples():
    layer = qz.quantize_weights([[0.0, 0.26]], [0.1])
    assert layer.codes.tolist() == [[0, 3]]
    assert np.allclose(qz.dequantize(layer), [[0.0, 0.3]], atol=1e-15)
    assert qz.quantize_codes([[0.25]], [0.1]).item() == 2
    assert qz.quantize_codes([[5.0]], [0.1]).item() == 7
    assert qz.quantize_codes([[-5.0]], [0.1]).item() == -8
    with pytest.raises(qz.QuantizationError):
        qz.quantize_weights([[1.0]], [0.0])


def test_dequantize_examples():
    layer = qz.quantize_weights([[-8.0, 7.0]], [1.0])
    assert qz.dequantize(layer).tolist() == [[-8.0, 7.0]]
    zero = qz.quantize_weights(np.zeros((3, 5)), np.ones(3))
    assert np.array_equal(qz.dequantize(zero), np.zeros((3, 5)))


def test_pack_layout():
    # low nibble first, two's complement
    assert qz.pack_int4([1, -1]) == bytes([0xF1])
    assert qz.pack_int4([-8, 7, 3]) == bytes([0x78, 0x03])
    assert qz.unpack_int4(bytes([0x78, 0x03]), 3).tolist() == [-8, 7, 3]
    with pytest.raises(qz.PackingError):
        qz.pack_int4([8])
    with pytest.raises(qz.PackingError):
        qz.unpack_int4(bytes(3), 3)


@settings(max_examples=60)
@given(st.lists(st.integers(-8, 7), max_size=41))
def test_pack_round_trip(codes):
    data = qz.pack_int4(codes)
    assert len(data) == (len(codes) + 1) // 2
    assert qz.unpack_int4(data, len(codes)).tolist() == codes


def test_int8_codes_round_trip(rng):
    w = rng.normal(size=(4, 5))
    layer = qz.quantize_weights(w, np.full(4, 0.02), bits=8)
    assert len(layer.packed) == 20
    assert np.abs(layer.codes).max() <= 128
    assert np.array_equal(qz.quantize_weights(qz.dequantize(layer), layer.scales, 8).codes, layer.codes)


def test_error_bound_and_fixed_point(rng):
    for _ in range(1000):
        d_in, d_out = rng.integers(1, 7, 2)
        s = rng.uniform(0.01, 1.0, d_in)
        w = rng.normal(scale=rng.uniform(0.05, 3), size=(d_in, d_out))
        layer = qz.quantize_weights(w, s)
        back = qz.dequantize(layer)
        in_range = np.abs(w / s[:, None]) <= 7
        err = np.abs(w - back)
        assert np.all(err[in_range] <= (np.broadcast_to(s[:, None], w.shape)[in_range] / 2 + 1e-12))
        again = qz.quantize_weights(back, s)
        assert np.array_equal(again.codes, layer.codes)


def test_payload_size_formula(rng):
    for d_in, d_out in [(1, 1), (3, 5), (100, 400), (7, 7)]:
        layer = qz.quantize_weights(rng.normal(size=(d_in, d_out)), np.ones(d_in))
        assert layer.payload_bytes() == qz.packed_payload_bytes(d_in, d_out)
        assert layer.payload_bytes() == -(-d_in * d_out // 2) + 4 * d_in


def test_code_payload_is_exactly_an_eighth():
    assert qz.int4_code_mb(550) == 68.75


# ------------------------------------------------- activation weighting

def test_activation_weighted_scales_equalise_output_error(rng):
    w = rng.normal(size=(6, 4))
    a = np.array([0.1, 0.5, 1.0, 2.0, 4.0, 8.0])
    s = qz.activation_weighted_scales(w, a, 4)
    # a_i * s_i is the same for every channel, up to float32 storage
    assert np.allclose(a * s, (a * s)[0], rtol=1e-6)
    assert np.abs(qz.quantize_codes(w, s)).max() == 7


def test_snap_step_is_a_short_mantissa():
    for x in (0.1, 3.7e-5, 123.456):
        y = qz.snap_step(x)
        m, _ = np.frexp(y)
        assert abs(y - x) <= x * 2 ** -8
        assert (m * 256) == np.rint(m * 256)
    assert qz.snap_step(0.5) == 0.5


def test_verbatim_mode_follows_quantile_formula(rng):
    qs = np.array([15.0, 1.5, 0.0])
    s, deg = qz.scales_from_quantiles(qs, qz.QuantPolicy(mode="verbatim"))
    assert np.allclose(s, [1.0, 0.1, 1e-8], rtol=1e-7)
    assert deg.tolist() == [False, False, True]


# ------------------------------------------------------------ calibration

def test_calibration_covers_every_selected_layer(small_calib):
    model, stats, _ = small_calib
    for name in qz.QuantPolicy().select(model):
        arr = stats.arrays(name)
        assert arr is not None, name
        rows = min(len(a) for a in arr.values()) if isinstance(arr, dict) else len(arr)
        assert rows >= 12
        first = next(iter(arr.values())) if isinstance(arr, dict) else arr
        assert first.shape[1] == model.params[name].shape[0]
    assert stats.sample_count == 12


def _same_stats(a_stats, b_stats):
    for name in a_stats.layer_names():
        a, b = a_stats.arrays(name), b_stats.arrays(name)
        pairs = [(a[m], b[m]) for m in a] if isinstance(a, dict) else [(a, b)]
        if not all(np.array_equal(x, y) for x, y in pairs):
            return False
    return True


def test_calibration_deterministic(small_calib):
    model, stats, (images, tokens, vectors) = small_calib
    again = qz.collect_calibration_stats(model, images, tokens, vectors, batch_size=5)
    assert _same_stats(stats, again)
    # regrouping reorders rows and moves BLAS rounding; quantiles see neither
    regrouped = qz.collect_calibration_stats(model, images, tokens, vectors, batch_size=7)
    a, b = qz.stats_quantiles(stats, 0.99), qz.stats_quantiles(regrouped, 0.99)
    assert a.keys() == b.keys()
    assert all(np.allclose(a[k], b[k], rtol=0, atol=1e-12) for k in a)


def test_zero_model_records_zero_activations():
    model = Model.init(ModelConfig(), 0)
    # modality weights are clamped positive in training, so they keep their init
    model.params = {k: (v if k == "fusion.modality_w" else np.zeros_like(v))
                    for k, v in model.params.items()}
    r = np.random.default_rng(1)
    stats = qz.collect_calibration_stats(model, r.uniform(size=(2, 3, 32, 32)),
                                         r.integers(0, 63, (2, 16)), r.dirichlet(np.ones(5), 2))
    assert not stats.arrays("head.fc2.w").any()
    _, deg = qz.scales_from_quantiles(qz.layer_quantiles("head.fc2.w", stats, 0.99),
                                      qz.QuantPolicy(mode="verbatim"))
    assert deg.all()


def test_empty_calibration_rejected():
    with pytest.raises(qz.QuantizationError):
        qz.collect_calibration_stats(Model.init(ModelConfig(), 0), np.zeros((0, 3, 32, 32)),
                                     np.zeros((0, 16), int), np.zeros((0, 5)))


def test_fusion_qkv_uses_coarsest_modality_group(small_calib):
    _, stats, _ = small_calib
    groups = stats.arrays("fusion.attn.wq")
    assert set(groups) == {"img", "text", "vec"}
    per = np.array([np.quantile(g, 0.99, axis=0) for g in groups.values()])
    assert np.allclose(qz.layer_quantiles("fusion.attn.wq", stats, 0.99), per.max(axis=0))


# ---------------------------------------------------------------- apply

def test_default_policy_layer_selection(small_calib):
    model, _, _ = small_calib
    sel = qz.QuantPolicy().select(model)
    assert "text.layer0.attn.wq" not in sel
    assert {"text.layer0.attn.wk", "text.layer0.attn.wv"} <= set(sel)
    assert {"fusion.attn.wq", "fusion.attn.wk", "fusion.attn.wv", "fusion.out.w"} <= set(sel)
    assert not any(n.endswith((".b", ".g")) or "embed" in n for n in sel)


@pytest.mark.parametrize("mode", qz.SCALE_MODES)
def test_apply_touches_only_selected_layers(small_calib, mode):
    model, stats, _ = small_calib
    q = qz.apply_awq(model, stats, qz.QuantPolicy(mode=mode))
    sel = set(q.layers)
    assert sel == set(qz.QuantPolicy().select(model))
    for name, v in model.params.items():
        if name not in sel:
            assert np.array_equal(q.model.params[name], v), name
    assert np.array_equal(q.model.params["text.layer0.attn.wq"], model.params["text.layer0.attn.wq"])


@pytest.mark.parametrize("mode", qz.SCALE_MODES)
def test_double_application_is_idempotent(small_calib, mode):
    model, stats, _ = small_calib
    policy = qz.QuantPolicy(mode=mode)
    once = qz.apply_awq(model, stats, policy)
    twice = qz.apply_awq(once.model, stats, policy)
    for name in once.layers:
        assert np.array_equal(once.layers[name].codes, twice.layers[name].codes), name
        assert np.array_equal(once.model.params[name], twice.model.params[name]), name


def test_empty_policy_is_a_no_op(small_calib):
    model, stats, _ = small_calib
    q = qz.apply_awq(model, stats, qz.QuantPolicy.empty())
    assert q.layers == {}
    assert all(np.array_equal(q.model.params[k], v) for k, v in model.params.items())


def test_missing_stats_names_layers(small_calib):
    model, stats, _ = small_calib
    partial = qz.stats_quantiles(stats, 0.99)
    del partial["vector.fc1.w"], partial["head.fc2.w"]
    with pytest.raises(qz.MissingStatsError, match="head.fc2.w.*vector.fc1.w"):
        qz.apply_awq(model, partial, qz.QuantPolicy())
    partial = qz.stats_quantiles(stats, 0.99)
    partial["vector.fc1.w"] = partial["vector.fc1.w"][:-1]
    with pytest.raises(qz.QuantizationError, match="channels"):
        qz.apply_awq(model, partial, qz.QuantPolicy())


def test_reduced_stats_equal_raw_stats(small_calib):
    model, stats, _ = small_calib
    a = qz.apply_awq(model, stats, qz.QuantPolicy())
    b = qz.apply_awq(model, qz.stats_quantiles(stats, 0.99), qz.QuantPolicy())
    assert all(np.array_equal(a.model.params[k], b.model.params[k]) for k in a.layers)


def test_report_on_identical_models(small_calib):
    model, stats, (images, tokens, vectors) = small_calib
    labels = np.zeros(len(images), int)
    rep = qz.quantization_report(model, model, images, tokens, vectors, labels)
    assert rep["agreement"] == 1.0
    assert rep["layers"] == {}
    q = qz.apply_awq(model, stats, qz.QuantPolicy())
    rep = qz.quantization_report(model, q.model, images, tokens, vectors, labels, q.layers)
    assert set(rep["layers"]) == set(q.layers)
    sizes = rep["sizes"]
    assert sizes["quantized_bytes"] == sizes["fp32_bytes"] - sizes["selected_fp32_bytes"] \
        + sizes["selected_total_bytes"]
    assert sizes["code_ratio"] == pytest.approx(8.0, rel=1e-3)
