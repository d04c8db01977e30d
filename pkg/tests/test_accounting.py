import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gkt.accounting import (
    comm_cost_gkt,
    comm_cost_sl,
    cost_report,
    count_flops,
    count_params,
    feature_bytes,
    layer_flops,
    soft_label_bytes,
    train_flops,
)
from gkt.models import EdgeModel, ServerModel, named_model, toy_specs
from gkt.nn import Conv2d, Linear, Module, Sequential


# Independent walk of the formula sheet over the architecture description.
def bottleneck_flops(c, h, planes, stride):
    out = 4 * planes
    f = 2 * planes * h * h * c + 3 * planes * h * h
    h2 = (h - 1) // stride + 1
    f += 2 * planes * h2 * h2 * planes * 9 + 3 * planes * h2 * h2
    f += 2 * out * h2 * h2 * planes + 2 * out * h2 * h2
    if stride != 1 or c != out:
        f += 2 * out * h2 * h2 * c + 2 * out * h2 * h2
    return f + 2 * out * h2 * h2, out, h2


def stages_flops(c, h, plan):
    total = 0
    for planes, blocks, stride in plan:
        for i in range(blocks):
            f, c, h = bottleneck_flops(c, h, planes, stride if i == 0 else 1)
            total += f
    return total, c, h


def extractor_flops(cin, stem, h):
    return 2 * stem * h * h * cin * 9 + 2 * stem * h * h + stem * h * h + 9 * stem * h * h


def head_flops(c, h, classes):
    return c * h * h + 2 * c * classes


def resnet8_flops(h=32, classes=10):
    f, c, h2 = stages_flops(16, h, [(16, 2, 1)])
    return extractor_flops(3, 16, h) + f + head_flops(c, h2, classes)


def server_flops(n, h=32, classes=10, width=16, in_ch=16):
    f, c, h2 = stages_flops(in_ch, h, [(width, n, 1), (2 * width, n, 2), (4 * width, n, 2)])
    return f + head_flops(c, h2, classes)


def test_trivial_examples():
    fc = Linear(16, 10)
    assert count_params(fc) == 170
    assert count_flops(Conv2d(1, 1, 1), (1, 1, 1)) == 2
    assert count_flops(Conv2d(1, 1, 1, bias=True), (1, 1, 1)) == 3


def test_flops_match_formula_walk():
    assert count_flops(named_model("resnet8")) == resnet8_flops() == 20_350_208
    assert count_flops(named_model("resnet55")) == server_flops(6)
    extractor = extractor_flops(3, 16, 32)
    assert count_flops(named_model("resnet56")) == extractor + server_flops(6) == 178_766_848
    assert count_flops(named_model("resnet110")) == extractor + server_flops(12) == 342_983_680


def test_paper_flop_ratios():
    r8 = count_flops(named_model("resnet8"))
    r56 = count_flops(named_model("resnet56"))
    r110 = count_flops(named_model("resnet110"))
    assert abs(r56 / r8 - 9) <= 0.2 * 9
    assert abs(r110 / r8 - 17) <= 0.2 * 17


def test_flops_ignore_weights():
    a, b = named_model("toy-full", seed=0), named_model("toy-full", seed=9)
    for p in b.parameters():
        p.data[...] = 0
    assert count_flops(a) == count_flops(b)


def test_composition_is_additive():
    edge_spec, srv_spec = toy_specs()
    edge, server = EdgeModel(edge_spec), ServerModel(srv_spec)
    ext, shape = layer_flops(edge.extractor, (3, 8, 8))
    assert count_flops(named_model("toy-full", num_classes=4)) == ext + count_flops(server)
    assert train_flops(edge) == 3 * count_flops(edge)
    with pytest.raises(TypeError, match="no FLOP rule"):
        layer_flops(Sequential(Module()), (1, 1, 1))


def test_sl_cost_oracle():
    # 4096 f32 values are 16,384 bytes each way
    per_sample = feature_bytes((4096,)) + feature_bytes((4096,))
    assert per_sample == 32_768
    assert comm_cost_sl(feature_bytes((4096,)), feature_bytes((4096,)), 1000, 2) == 65_536_000
    assert comm_cost_sl(4096, 4096, 1000, 0) == 0
    assert comm_cost_gkt(4096, 40, 1000, 0) == 0
    with pytest.raises(ValueError, match="non-negative"):
        comm_cost_gkt(-1, 40, 10, 1)


@given(st.integers(0, 10**6), st.integers(0, 10**6), st.integers(0, 10**5), st.integers(0, 300), st.integers(1, 5))
def test_costs_are_linear(f, g, n, e, m):
    assert comm_cost_sl(f, g, n, m * e) == m * comm_cost_sl(f, g, n, e)
    assert comm_cost_sl(m * f, m * g, n, e) == m * comm_cost_sl(f, g, n, e)
    assert comm_cost_gkt(f, g, m * n, e) == m * comm_cost_gkt(f, g, n, e)
    assert comm_cost_gkt(f, g, n, e) + comm_cost_gkt(f, g, n, 1) == comm_cost_gkt(f, g, n, e + 1)


def test_sl_to_gkt_ratio_with_equal_gradient_size():
    fb = feature_bytes((16, 32, 32))
    sl = comm_cost_sl(fb, fb, 50_000, 100)
    gkt = comm_cost_gkt(fb, soft_label_bytes(10), 50_000, 100)
    assert abs(sl / gkt - 2.0) <= 0.2
    assert abs(gkt / sl - 0.5) <= 0.05


def test_cost_report_fields():
    rep = cost_report({"resnet8": named_model("resnet8")}, num_samples=100, epochs=2,
                      feature_shape=(16, 32, 32), num_classes=10, rounds=3)
    d = rep.to_dict()
    assert d["params"]["resnet8"] == 10_586
    assert d["flops_per_sample_train"]["resnet8"] == 3 * 20_350_208
    assert d["total_petaflops"]["resnet8"] == pytest.approx(3 * 20_350_208 * 200 / 1e15)
    assert d["comm_bytes"]["gkt"] == (65_536 + 40) * 100 * 3
    assert d["comm_bytes"]["sl"] == 2 * 65_536 * 100 * 2
    assert np.isclose(d["train_factor"], 3)
