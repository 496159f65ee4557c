import numpy as np
import pytest

from convmpn.geometry import InferenceGraph, build_inference_graph
from convmpn.layers import to_dtype
from convmpn.model import ModelConfig, NodeInputs, build_model, confidences, expected_shapes, node_inputs
from convmpn.tensor import ShapeError, Tensor, no_grad, precision
from convmpn.trainer import weighted_bce

from oracles import branch_pattern, rel_err, richardson

# Output Size cells of the two architecture tables, copied by hand (C, H, W) per node.
CONV_MPN_TABLE = {
    "conv_relu_bn1": (16, 256, 256),
    "residual_block1": (16, 256, 256),
    "residual_block2": (32, 128, 128),
    "residual_block3": (64, 64, 64),
    "conv_relu_bn2": (32, 64, 64),
    "message_passing": (32, 64, 64),
    "verification_convs": (128, 64, 64),
    "max_pooling": (128, 2, 2),
    "fc": (2,),
}
GNN_TABLE = {
    "conv_relu_bn1": (16, 256, 256),
    "residual_block1": (16, 256, 256),
    "residual_block2": (32, 128, 128),
    "residual_block3": (64, 64, 64),
    "conv_relu_bn2_7": (128, 64, 64),
    "max_pooling": (128, 2, 2),
    "message_passing": (512,),
    "fc": (2,),
}


def _square(size=64):
    s = size
    return [(0.2 * s, 0.2 * s), (0.8 * s, 0.2 * s), (0.8 * s, 0.8 * s), (0.2 * s, 0.8 * s)]


def _image(size=64, seed=0):
    return np.random.default_rng(seed).random((3, size, size)).astype(np.float32)


def _run(model, inputs, graph, **kw):
    model.eval()
    with no_grad():
        return model.forward_inputs(inputs, graph, **kw).data


def _paper_record(variant):
    cfg = ModelConfig.paper(t=1, variant=variant)
    model = build_model(cfg).eval()
    x = Tensor(np.random.default_rng(0).random((1, 4, 256, 256)))
    rec = []
    with no_grad():
        model.forward_inputs(x, InferenceGraph([(0, 1)], [[]]), record=rec)
    return rec


def conv_mpn_stage_shapes():
    rec = _paper_record("conv_mpn")
    return {
        "conv_relu_bn1": rec[0],
        "residual_block1": rec[1],
        "residual_block2": rec[2],
        "residual_block3": rec[4],
        "conv_relu_bn2": rec[5],
        "message_passing": rec[12],
        "verification_convs": rec[17],
        "max_pooling": rec[18],
        "fc": rec[19],
    }


def gnn_stage_shapes():
    rec = _paper_record("vanilla_gnn")
    return {
        "conv_relu_bn1": rec[0],
        "residual_block1": rec[1],
        "residual_block2": rec[2],
        "residual_block3": rec[4],
        "conv_relu_bn2_7": rec[10],
        "max_pooling": rec[11],
        "message_passing": rec[18],
        "fc": rec[19],
    }


def test_paper_preset_conv_mpn_matches_table():
    assert conv_mpn_stage_shapes() == CONV_MPN_TABLE


def test_paper_preset_gnn_matches_table():
    assert gnn_stage_shapes() == GNN_TABLE


def test_shape_algebra_agrees_with_forward_pass():
    cfg = ModelConfig.paper(t=1)
    exp = expected_shapes(cfg)
    rec = _paper_record("conv_mpn")
    assert rec[:6] == exp["feature_init"]
    assert rec[6:13] == exp["message_passing"]
    assert rec[13:19] == exp["verification"][:6]


def test_desk_preset_feature_volume():
    cfg = ModelConfig.desk()
    assert expected_shapes(cfg)["feature_init"][-1] == (8, 16, 16)
    assert expected_shapes(cfg)["verification"][-1] == (2,)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig.paper(t=4)
    ModelConfig.desk(t=5)
    with pytest.raises(ValueError):
        ModelConfig.desk(variant="unknown")
    with pytest.raises(ValueError):
        ModelConfig.desk(pooling="min")
    with pytest.raises(ValueError):
        ModelConfig.from_dict({**ModelConfig.desk().to_dict(), "extra": 1})


def test_config_digest_tracks_contents():
    a = ModelConfig.desk()
    assert a.digest() == ModelConfig.from_dict(a.to_dict()).digest()
    assert a.digest() != ModelConfig.desk(t=2).digest()


def test_node_inputs_dense_layout():
    corners = _square()
    graph = build_inference_graph(corners)
    inputs = node_inputs(_image(), corners, graph)
    dense = inputs.dense()
    assert dense.shape == (6, 4, 64, 64)
    np.testing.assert_array_equal(dense.data[3, :3], _image())
    assert set(np.unique(dense.data[:, 3])) == {0.0, 1.0}


def test_factored_and_dense_inputs_agree():
    corners = _square()
    graph = build_inference_graph(corners)
    inputs = node_inputs(_image(), corners, graph)
    model = build_model(ModelConfig.desk(t=1))
    np.testing.assert_allclose(_run(model, inputs, graph), _run(model, inputs.dense(), graph), atol=1e-4)


def test_image_size_mismatch_rejected():
    corners = _square(32)
    graph = build_inference_graph(corners)
    inputs = node_inputs(_image(32), corners, graph)
    with pytest.raises(ShapeError):
        _run(build_model(ModelConfig.desk()), inputs, graph)


def test_neighbor_order_does_not_change_output_bits():
    corners = _square() + [(32.0, 10.0)]
    graph = build_inference_graph(corners)
    inputs = node_inputs(_image(), corners, graph)
    rng = np.random.default_rng(3)
    shuffled = InferenceGraph(graph.nodes, [list(rng.permutation(nb)) for nb in graph.adjacency])
    model = build_model(ModelConfig.desk(t=2))
    a = _run(model, inputs, graph)
    b = _run(model, inputs, shuffled)
    assert a.tobytes() == b.tobytes()


def test_disconnected_graph_equals_zero_message_variant():
    corners = _square()
    graph = build_inference_graph(corners)
    inputs = node_inputs(_image(), corners, graph)
    mpn = build_model(ModelConfig.desk(t=1))
    zero = build_model(ModelConfig.desk(t=1, variant="zero_message"))
    a = _run(mpn, inputs, graph.disconnected())
    b = _run(zero, inputs, graph)
    assert a.tobytes() == b.tobytes()
    assert not np.array_equal(a, _run(mpn, inputs, graph))


def test_per_edge_equals_zero_iterations():
    corners = _square()
    graph = build_inference_graph(corners)
    inputs = node_inputs(_image(), corners, graph)
    mpn = build_model(ModelConfig.desk(t=2))
    per_edge = build_model(ModelConfig.desk(t=2, variant="per_edge"))
    assert not per_edge.mp_layers
    shared = {k: v for k, v in mpn.state_dict().items() if not k.startswith("mp")}
    per_edge.load_state_dict(shared)
    a = _run(mpn, inputs, graph, iterations=0)
    b = _run(per_edge, inputs, graph)
    assert a.tobytes() == b.tobytes()


def test_message_passing_weights_are_unshared():
    model = build_model(ModelConfig.desk(t=3))
    assert len(model.mp_layers) == 3
    first = [p.data for p in model.mp_layers[0][0].parameters()]
    second = [p.data for p in model.mp_layers[1][0].parameters()]
    assert all(a.shape == b.shape for a, b in zip(first, second))
    assert not np.array_equal(first[0], second[0])
    names = [n for n, _ in model.named_parameters()]
    assert len(names) == len(set(names))


def test_iteration_bounds():
    corners = _square()
    graph = build_inference_graph(corners)
    inputs = node_inputs(_image(), corners, graph)
    with pytest.raises(IndexError):
        _run(build_model(ModelConfig.desk(t=1)), inputs, graph, iterations=2)


@pytest.mark.parametrize("pooling", ["max", "sum", "mean"])
def test_pooling_modes_give_finite_confidences(pooling):
    corners = _square()
    model = build_model(ModelConfig.desk(t=1, pooling=pooling)).eval()
    with no_grad():
        conf = confidences(model(_image(), corners)).data
    assert conf.shape == (6,)
    assert np.all((conf >= 0) & (conf <= 1))


def test_forward_needs_two_corners():
    model = build_model(ModelConfig.desk())
    with pytest.raises(ValueError):
        model(_image(), [(3.0, 3.0)])


def test_vanilla_gnn_desk_forward():
    corners = _square()
    model = build_model(ModelConfig.desk(t=2, variant="vanilla_gnn")).eval()
    with no_grad():
        logits = model(_image(), corners)
    assert logits.shape == (6, 2)
    assert len(model.mp_layers) == 2
    exp = expected_shapes(ModelConfig.desk(variant="vanilla_gnn"))
    assert exp["gnn_message_passing"][-1] == (128,)


def test_state_dict_round_trip():
    a = build_model(ModelConfig.desk(seed=1))
    b = build_model(ModelConfig.desk(seed=2))
    b.load_state_dict(a.state_dict())
    for k, v in a.state_dict().items():
        np.testing.assert_array_equal(v, b.state_dict()[k])
    with pytest.raises(KeyError):
        b.load_state_dict({})


def _loss_fn(model, inputs, graph, labels):
    return weighted_bce(confidences(model.forward_inputs(inputs, graph)), labels)


@pytest.mark.parametrize("variant,seed", [(v, s) for v in ("conv_mpn", "vanilla_gnn") for s in range(10)])
def test_end_to_end_gradient_float64(variant, seed):
    """Central differences on sampled weights of every kind of layer, in float64."""
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        model = to_dtype(build_model(ModelConfig.desk(t=1, variant=variant, seed=seed)), np.float64)
        model.train()
        corners = [tuple(p) for p in rng.uniform(8, 56, size=(3, 2)).round(1)]
        graph = build_inference_graph(corners)
        image = rng.random((3, 64, 64))
        inputs = node_inputs(image, corners, graph)
        labels = rng.integers(0, 2, len(graph)).astype(float)
        params = model.parameters()
        _loss_fn(model, inputs, graph, labels).backward()
        analytic, numeric = [], []
        steps = (1e-5, 5e-6, 2.5e-6)
        while len(analytic) < 12:
            p = params[int(rng.integers(len(params)))]
            idx = tuple(int(rng.integers(n)) for n in p.shape)
            old = p.data[idx]
            diffs, patterns = [], []
            for h in steps:
                values = []
                for step in (h, -h):
                    p.data[idx] = old + step
                    with no_grad(), branch_pattern() as seen:
                        values.append(_loss_fn(model, inputs, graph, labels).item())
                    patterns.append(seen)
                diffs.append((values[0] - values[1]) / (2 * h))
            p.data[idx] = old
            if any(pat != patterns[0] for pat in patterns):
                continue  # a probe crosses a ReLU / max / clip boundary; finite differences are invalid there
            analytic.append(p.grad[idx])
            numeric.append(richardson(diffs))
    assert rel_err(analytic, numeric) < 1e-5
