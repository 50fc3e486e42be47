import json
import math

import numpy as np
import pytest

from gsp import autodiff as ad
from gsp.autodiff import GradientError, SparseMatrix, Tape
from gsp.backbone import (FrozenBackbone, WeightsError, forward, init_weights, load_weights,
                          readout, save_weights)
from gsp.graph import make_batch, synthesize_sbm
from gsp.pretrain import PretrainConfig, edge_scores, pretrain, sample_negatives


def random_backbone(seed=0, dims=(5, 8, 8, 8)):
    rng = np.random.default_rng(seed)
    return FrozenBackbone(tuple(init_weights(dims[0], dims[1], len(dims) - 1, rng)))


def test_identity_single_layer_is_identity_map():
    x = np.random.default_rng(0).normal(size=(4, 3))
    bb = FrozenBackbone((np.eye(3),))
    h = forward(bb, SparseMatrix.identity(4), Tape().leaf(x))
    assert np.array_equal(h.value, x)


def test_zero_weights_give_zero_embeddings():
    bb = FrozenBackbone((np.zeros((3, 4)), np.zeros((4, 4))))
    x = np.random.default_rng(1).normal(size=(5, 3))
    assert np.array_equal(forward(bb, SparseMatrix.identity(5), Tape().leaf(x)).value, np.zeros((5, 4)))


def test_weights_are_frozen():
    bb = random_backbone()
    tape = Tape()
    x = tape.leaf(np.ones((3, 5)))
    loss = ad.total(forward(bb, SparseMatrix.identity(3), x))
    with pytest.raises(GradientError):
        tape.backward(loss, [bb.weights[0]])
    weight_vars = [v for v in tape.vars if v.value is bb.weights[0]]
    with pytest.raises(GradientError):
        tape.backward(loss, weight_vars)
    with pytest.raises(ValueError):
        bb.weights[0][0, 0] = 1.0
    (gx,) = tape.backward(loss, [x])
    assert np.any(gx != 0)


def test_forward_dimension_mismatch():
    with pytest.raises(ValueError, match="input dim"):
        forward(random_backbone(), SparseMatrix.identity(2), Tape().leaf(np.ones((2, 4))))


def test_dim_chain_enforced():
    with pytest.raises(WeightsError, match="chain"):
        FrozenBackbone((np.ones((3, 4)), np.ones((5, 4))))


def test_readout_is_mean_pool():
    h = Tape().leaf([[2.0, 4.0], [4.0, 8.0], [1.0, 1.0]])
    assert np.array_equal(readout(h, [0, 0, 1]).value, [[3.0, 6.0], [1.0, 1.0]])


def test_save_load_round_trip_bitwise(tmp_path):
    bb = random_backbone(3)
    path = tmp_path / "w.json"
    save_weights(bb, path)
    again = load_weights(path)
    assert again.fingerprint() == bb.fingerprint()
    ds = synthesize_sbm(2, [4, 4], 0.5, 0.1, 5, seed=0)
    b = make_batch(ds)
    h1 = forward(bb, b.adjacency, Tape().leaf(b.features)).value
    h2 = forward(again, b.adjacency, Tape().leaf(b.features)).value
    assert h1.tobytes() == h2.tobytes()
    doc = json.loads(path.read_text())
    assert doc["layers"] == 3 and doc["input_dim"] == 5 and doc["hidden_dim"] == 8


def test_truncated_file(tmp_path):
    path = tmp_path / "w.json"
    save_weights(random_backbone(), path)
    path.write_text(path.read_text()[:100])
    with pytest.raises(WeightsError, match="parse error"):
        load_weights(path)


def test_layer_count_mismatch(tmp_path):
    path = tmp_path / "w.json"
    save_weights(random_backbone(dims=(5, 8, 8)), path)
    doc = json.loads(path.read_text())
    doc["layers"] = 3
    path.write_text(json.dumps(doc))
    with pytest.raises(WeightsError, match="layers=3 but 2"):
        load_weights(path)


def test_version_mismatch(tmp_path):
    path = tmp_path / "w.json"
    save_weights(random_backbone(), path)
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    path.write_text(json.dumps(doc))
    with pytest.raises(WeightsError, match="format_version"):
        load_weights(path)


# ---------------------------------------------------------------- pre-training

def two_clique_sbm(seed=0):
    return synthesize_sbm(2, [15, 15], 0.6, 0.02, 8, seed)


def test_zero_init_starts_at_ln2():
    losses = []
    pretrain(two_clique_sbm(), PretrainConfig(epochs=1, init="zeros", hidden_dim=4),
             callback=lambda e, l: losses.append(l))
    assert abs(losses[0] - math.log(2)) <= 1e-15


def test_pretrain_deterministic():
    cfg = PretrainConfig(epochs=5, hidden_dim=6, lr=0.05, seed=4)
    a, b = pretrain(two_clique_sbm(), cfg), pretrain(two_clique_sbm(), cfg)
    assert a.fingerprint() == b.fingerprint()


def test_pretrain_loss_decreases_and_separates():
    losses = []
    ds = two_clique_sbm()
    bb = pretrain(ds, PretrainConfig(epochs=150, lr=0.05, hidden_dim=16, seed=0),
                  callback=lambda e, l: losses.append(l))
    assert losses[-1] < losses[0]
    b = make_batch(ds)
    edges = b.edges
    neg = sample_negatives(30, {tuple(e) for e in edges.tolist()}, len(edges),
                           np.random.default_rng(99))
    pos_s = edge_scores(bb, b.adjacency, b.features, edges).mean()
    neg_s = edge_scores(bb, b.adjacency, b.features, neg).mean()
    assert pos_s > neg_s


def test_pretrain_with_adapter_output_dims():
    bb = pretrain(two_clique_sbm(), PretrainConfig(epochs=2, hidden_dim=4, layers=2, input_dim=3))
    assert bb.adapter.shape == (8, 3) and bb.input_dim == 3 and bb.num_layers == 2


def test_pretrain_rejects_edgeless_graph():
    ds = synthesize_sbm(2, [3, 3], 0.0, 0.0, 2, 0)
    with pytest.raises(ValueError, match="at least one edge"):
        pretrain(ds, PretrainConfig(epochs=1))


@pytest.mark.parametrize("kw", [dict(epochs=0), dict(neg_ratio=0), dict(lr=0.0)])
def test_pretrain_config_validation(kw):
    with pytest.raises(ValueError):
        PretrainConfig(**kw)


def test_negative_samples_are_non_edges():
    edges = {(0, 1), (1, 2)}
    neg = sample_negatives(4, edges, 30, np.random.default_rng(0))
    assert len(neg) == 30
    for u, v in neg:
        assert u != v and (min(u, v), max(u, v)) not in edges
