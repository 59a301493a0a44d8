import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shuffleseg.errors import ConfigError, ShapeError
from shuffleseg.flops import count_graph
from shuffleseg.graph import (
    VARIANTS, ArchConfig, Graph, LayerNode, ShuffleUnitSpec, WeightStore, _Builder, build_graph,
    build_shuffle_unit, graph_backward, graph_forward, infer_shapes, init_weights,
)
from shuffleseg.ops import ConvSpec

TINY = dict(n_classes=5, width_multiplier=0.25)


def shapes_of(variant, h=512, w=1024, **kw):
    g = build_graph(ArchConfig(variant=variant, **kw))
    return g, infer_shapes(g, (1, 3, h, w))


def test_unit_identity_shape():
    b = _Builder()
    out = build_shuffle_unit(b, "u", ShuffleUnitSpec(240, 240), "input")
    g = Graph(b.nodes, {}, out, input_channels=240)
    assert infer_shapes(g, (1, 240, 16, 32))[out] == (1, 240, 16, 32)
    assert g.node("u.add").kind == "add"


def test_unit_stage2_entry():
    spec = ShuffleUnitSpec(24, 240, stride=2, first_groups=1)
    assert spec.fusion == "concat" and spec.branch_channels == 216 and spec.mid_channels == 60
    b = _Builder()
    out = build_shuffle_unit(b, "u", spec, "input")
    g = Graph(b.nodes, {}, out, input_channels=24)
    shapes = infer_shapes(g, (1, 24, 128, 256))
    assert shapes["u.gconv2"] == (1, 216, 64, 128)
    assert shapes["u.pool"] == (1, 24, 64, 128)
    assert shapes[out] == (1, 240, 64, 128)
    assert g.node("u.gconv1").spec.groups == 1 and g.node("u.gconv2").spec.groups == 3


def test_unit_spec_validation():
    with pytest.raises(ConfigError):
        ShuffleUnitSpec(240, 240, stride=2)
    with pytest.raises(ConfigError):
        ShuffleUnitSpec(240, 120)
    with pytest.raises(ConfigError):
        ShuffleUnitSpec(24, 240, stride=3)


def test_encoder_taps_full_size():
    g, s = shapes_of("skipnet")
    assert s[g.taps["conv1"]] == (1, 24, 256, 512)
    assert s[g.taps["pool1"]] == (1, 24, 128, 256)
    assert s[g.taps["stage2"]] == (1, 240, 64, 128)
    assert s[g.taps["stage3"]] == (1, 480, 32, 64)
    assert s[g.taps["stage4"]] == (1, 960, 16, 32)
    units = {n.name.rsplit(".", 1)[0] for n in g.nodes if n.name.startswith("stage") and n.name.endswith(".out")}
    assert len(units) == 13


def test_width_multiplier():
    assert ArchConfig(width_multiplier=0.25).channels == (60, 120, 240)
    for m in (0.3, 0.5, 0.77, 2.0):
        assert all(c % 3 == 0 for c in ArchConfig(width_multiplier=m).channels)
    assert ArchConfig(groups=8, width_multiplier=0.25).channels == (96, 192, 384)


def test_skipnet_decoder():
    g, s = shapes_of("skipnet")
    tconvs = [n for n in g.nodes if n.kind == "tconv"]
    assert [n.spec.stride[0] for n in tconvs] == [2, 2, 8]
    assert all(n.spec.in_channels == n.spec.out_channels == 20 for n in tconvs)
    assert all(not n.spec.has_bias for n in tconvs)
    assert [s[n.name].h for n in tconvs] == [32, 64, 512]
    assert s[g.output] == (1, 20, 512, 1024)
    assert all(n.spec.has_bias for n in g.nodes if n.kind == "score")
    assert all(not n.spec.has_bias for n in g.nodes if n.kind == "conv")


def test_unet_decoder():
    g, s = shapes_of("unet")
    tconvs = [n for n in g.nodes if n.kind == "tconv"]
    assert [n.spec.out_channels for n in tconvs] == [480, 240, 24, 24, 20]
    fuses = [n for n in g.nodes if n.name.startswith("fuse")]
    assert fuses and all(n.kind == "add" for n in fuses)
    assert not [n for n in g.nodes if n.kind == "concat" and not n.name.startswith("stage")]
    assert s[g.output] == (1, 20, 512, 1024)


def test_dilation_variants():
    g, s = shapes_of("dilation8s")
    assert s[g.taps["stage4"]] == (1, 960, 64, 128)
    assert s[g.taps["stage3"]] == (1, 480, 64, 128)
    assert s[g.output] == (1, 20, 512, 1024)
    assert g.node("stage4.unit1.dwconv").spec.dilation == (4, 4)
    assert g.node("stage3.unit2.dwconv").spec.dilation == (2, 2)
    assert g.node("stage3.unit1.pool").spec.stride == (1, 1)
    g4, s4 = shapes_of("dilation4s")
    assert s4[g4.output] == (1, 20, 256, 512)
    d = g.node("stage4.unit1.dwconv").spec
    assert d.dilation[0] * (d.kernel[0] - 1) + 1 == 9


def test_tap_downsampling_invariant():
    for v in VARIANTS:
        g, s = shapes_of(v, 256, 512)
        factors = [256 // s[g.taps[t]].h for t in ("stage2", "stage3", "stage4")]
        assert factors == ([8, 16, 32] if v in ("skipnet", "unet") else [8, 8, 8])


@settings(max_examples=20, deadline=None)
@given(variant=st.sampled_from(VARIANTS), hm=st.integers(1, 6), wm=st.integers(1, 6))
def test_output_size_contract(variant, hm, wm):
    h, w = 32 * hm, 32 * wm
    g, s = shapes_of(variant, h, w, **TINY)
    expect = (h // 2, w // 2) if variant == "dilation4s" else (h, w)
    assert (s[g.output].h, s[g.output].w) == expect


def test_invalid_sizes_rejected_before_compute():
    g = build_graph(ArchConfig(**TINY))
    with pytest.raises(ConfigError):
        infer_shapes(g, (1, 3, 360, 640))
    with pytest.raises(ShapeError):
        infer_shapes(g, (1, 4, 64, 64))


def test_bad_wiring_rejected():
    conv = ConvSpec(3, 8, 1)
    with pytest.raises(ConfigError):
        Graph([LayerNode("a", "conv", conv, ("missing",))], {}, "a")
    with pytest.raises(ConfigError):
        Graph([LayerNode("a", "conv", conv, ("input",)), LayerNode("a", "relu", None, ("a",))], {}, "a")
    with pytest.raises(ConfigError):
        Graph([LayerNode("a", "conv", conv, ("input",)), LayerNode("b", "conv", conv, ("input",))], {}, "b")
    g = Graph([LayerNode("a", "conv", conv, ("input",)), LayerNode("b", "conv", conv, ("a",))], {}, "b")
    with pytest.raises(ShapeError):
        infer_shapes(g, (1, 3, 4, 4))


def test_param_census():
    for v in VARIANTS:
        g = build_graph(ArchConfig(variant=v))
        store = init_weights(g, 0)
        report = count_graph(g, (1, 3, 512, 1024))
        assert report.params == store.numel()
        assert report.buffers == sum(b.size for b in store.buffers.values())
        assert sorted(store.params) == sorted(g.param_keys())
    sk = count_graph(build_graph(ArchConfig(variant="skipnet")), (1, 3, 64, 64)).params
    un = count_graph(build_graph(ArchConfig(variant="unet")), (1, 3, 64, 64)).params
    assert sk < un


def test_init_kinds():
    g = build_graph(ArchConfig(variant="skipnet", **TINY))
    store = init_weights(g, 0)
    assert not store.params["score4.weight"].any() and not store.params["score4.bias"].any()
    up = store.params["up4.weight"]
    assert up[0, 0].max() > 0 and not up[0, 1].any()
    assert store.params["conv1.weight"].std() > 0
    assert np.array_equal(init_weights(g, 0).params["conv1.weight"], store.params["conv1.weight"])
    assert not np.array_equal(init_weights(g, 1).params["conv1.weight"], store.params["conv1.weight"])


@pytest.mark.parametrize("variant", VARIANTS)
def test_forward_backward_contract(variant):
    cfg = ArchConfig(variant=variant, **TINY)
    g = build_graph(cfg)
    store = init_weights(g, 0)
    x = np.random.default_rng(0).standard_normal((2, 3, 64, 64)).astype(np.float32)
    logits, cache = graph_forward(g, store, x, "train")
    scale = cfg.output_scale
    assert logits.shape == (2, 5, 64 // scale, 64 // scale)
    again, _ = graph_forward(g, store, x, "train")
    assert np.array_equal(logits, again)
    inf, none = graph_forward(g, store, x, "inference")
    assert none is None and inf.shape == logits.shape
    grads = graph_backward(g, store, cache, np.zeros_like(logits))
    assert sorted(grads) == sorted(store.params)
    assert all(not v.any() for v in grads.values())
    assert set(cache.buffers) == set(store.buffers)


def test_skipnet_toy_logits():
    g = build_graph(ArchConfig(**TINY))
    logits, _ = graph_forward(g, init_weights(g, 0), np.zeros((1, 3, 64, 128), np.float32), "inference")
    assert logits.shape == (1, 5, 64, 128)


def test_backward_requires_train_cache():
    g = build_graph(ArchConfig(**TINY))
    store = init_weights(g, 0)
    with pytest.raises(ConfigError):
        graph_backward(g, store, None, np.zeros((1, 5, 64, 64)))
    with pytest.raises(ConfigError):
        graph_forward(g, store, np.zeros((1, 3, 64, 64), np.float32), "eval")


def test_weightstore_mismatch_lists_keys():
    g = build_graph(ArchConfig(**TINY))
    store = init_weights(g, 0)
    store.params["bogus.weight"] = np.zeros(1)
    del store.params["conv1.weight"]
    with pytest.raises(ConfigError, match=r"missing=\['conv1.weight'\] extra=\['bogus.weight'\]"):
        store.check_matches(g)
    assert isinstance(store.copy(), WeightStore)


def test_arch_mapping():
    cfg = ArchConfig.from_mapping({"variant": "unet", "n_classes": "7", "width_multiplier": "0.5"})
    assert cfg.variant == "unet" and cfg.n_classes == 7
    assert ArchConfig.from_mapping({k: str(v) for k, v in cfg.to_mapping().items()}) == cfg
    with pytest.raises(ConfigError):
        ArchConfig.from_mapping({"depth": "3"})
    with pytest.raises(ConfigError):
        ArchConfig(variant="fcn")
    with pytest.raises(ConfigError):
        ArchConfig(width_multiplier=0)
