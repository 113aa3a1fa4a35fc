import numpy as np
import pytest

from helpers import layer_norm, params64, relu
from talkdistill import numkernel as nk
from talkdistill.comm import CommChannel, DenseReluDense, Message, add_noise
from talkdistill.errors import ConfigError, DimensionError
from talkdistill.nets import (FeatureBatch, FeatureEncoder, HiddenStates, LayerPartition,
                              PartitionedNet, checksum, take_rows)


def test_partition_taps_match_manual_forward(rng):
    net = PartitionedNet(5, (7, 6, 4), rng=rng, partition=LayerPartition(1, 3, 4))
    x = rng.normal(size=(3, 5)).astype(np.float32)
    y, st = net.forward_with_taps(nk.Tensor(x))
    P = params64(net.named_parameters())
    h1 = relu(x @ P["layer1.W"] + P["layer1.b"])
    h2 = relu(h1 @ P["layer2.W"] + P["layer2.b"])
    h3 = relu(h2 @ P["layer3.W"] + P["layer3.b"])
    np.testing.assert_allclose(st.s.data, h1, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(st.e.data, h3, rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(y.data, h3 @ P["layer4.W"] + P["layer4.b"], rtol=1e-5, atol=1e-5)
    assert (net.s_width, net.e_width) == (7, 4)


def test_run_middle_and_head_compose_to_forward(rng):
    net = PartitionedNet(4, (6, 3), rng=rng)
    x = nk.Tensor(rng.normal(size=(5, 4)))
    y, st = net.forward_with_taps(x)
    np.testing.assert_array_equal(net.run_middle(st.s).data, st.e.data)
    np.testing.assert_array_equal(net.run_head(st.e).data, y.data)


def test_run_middle_checks_width(rng):
    net = PartitionedNet(4, (6, 3), rng=rng)
    with pytest.raises(DimensionError, match="expected width 6"):
        net.run_middle(nk.Tensor(np.ones((2, 5))))


@pytest.mark.parametrize("l,h,n", [(0, 1, 2), (2, 2, 3), (1, 4, 3)])
def test_bad_partitions_rejected(l, h, n):
    with pytest.raises(ConfigError):
        LayerPartition(l, h, n)


def test_partition_must_match_depth(rng):
    with pytest.raises(ConfigError):
        PartitionedNet(3, (4, 4), rng=rng, partition=LayerPartition(1, 2, 4))


def test_freeze_toggles_all_parameters(rng):
    net = PartitionedNet(3, (4, 2), rng=rng)
    net.freeze()
    assert all(p.frozen and not p.requires_grad for p in net.parameters())
    net.freeze(False)
    assert all(p.requires_grad for p in net.parameters())


def test_checksum_is_order_sensitive(rng):
    a, b = nk.parameter(np.ones(2)), nk.parameter(np.full(2, 2.0))
    assert checksum([a, b]) != checksum([b, a])


def _batch():
    # three examples, title bags of sizes 2, 0, 1 and genre bags 1, 2, 1
    return FeatureBatch(np.array([1, 2, 0]), np.array([3, 1, 2]),
                        np.array([0, 2, 2, 3]), np.array([4, 1, 0]),
                        np.array([0, 1, 3, 4]), np.array([5, 1, 2, 0]))


def test_feature_batch_take_matches_rowwise_slices():
    fb = _batch()
    sub = fb.take(np.array([2, 0]))
    np.testing.assert_array_equal(sub.user, [0, 1])
    np.testing.assert_array_equal(sub.title_ptr, [0, 1, 3])
    np.testing.assert_array_equal(sub.title_idx, [0, 4, 1])
    np.testing.assert_array_equal(sub.genre_idx, [0, 5])
    assert len(take_rows(fb, np.array([1]))) == 1


def test_feature_encoder_mean_pools_bags(rng):
    enc = FeatureEncoder(3, 4, 6, 8, rng=rng, dims=(2, 2, 3, 3))
    out = enc(_batch()).data
    t = {n: p.data for n, p in enc.named_parameters()}
    np.testing.assert_allclose(out[0, :2], t["emb.user"][1])
    np.testing.assert_allclose(out[0, 4:7], (t["emb.title"][4] + t["emb.title"][1]) / 2, rtol=1e-6)
    np.testing.assert_array_equal(out[1, 4:7], 0.0)
    np.testing.assert_allclose(out[1, 7:], (t["emb.genre"][1] + t["emb.genre"][2]) / 2, rtol=1e-6)
    assert enc.out_dim == 10


def test_dense_relu_dense_matches_manual(rng):
    mod = DenseReluDense(4, 6, 3, rng, dropout=0.5, name="E_g")
    x = rng.normal(size=(2, 4)).astype(np.float32)
    P = params64(mod.named_parameters())
    h = layer_norm(relu(x @ P["E_g.fc1.W"] + P["E_g.fc1.b"]), P["E_g.ln.gamma"], P["E_g.ln.beta"])
    # eval mode: dropout off
    np.testing.assert_allclose(mod(nk.Tensor(x)).data, h @ P["E_g.fc2.W"] + P["E_g.fc2.b"],
                               rtol=1e-4, atol=1e-5)


def test_channel_roundtrip_shapes_and_names(rng):
    ch = CommChannel("h", 6, 4, msg_dim=5, hidden=8, rng=rng)
    states = HiddenStates(nk.Tensor(np.ones((3, 6))), nk.Tensor(np.ones((3, 4))))
    m = ch.encode(states, iteration=2)
    assert isinstance(m, Message) and m.width == 5 and m.iteration == 2
    back = ch.decode(m)
    assert back.widths == (6, 4)
    names = [n for n, _ in ch.named_parameters()]
    assert names[0] == "E_h.fc1.W" and names[-1] == "D_h.fc2.b"


def test_channel_eval_mode_is_deterministic(rng):
    ch = CommChannel("g", 3, 2, msg_dim=4, hidden=5, dropout=0.5, rng=rng)
    st = HiddenStates(nk.Tensor(rng.normal(size=(4, 3))), nk.Tensor(rng.normal(size=(4, 2))))
    a = ch.encode(st, rng=np.random.default_rng(1)).tensor.data
    b = ch.encode(st, rng=np.random.default_rng(2)).tensor.data
    np.testing.assert_array_equal(a, b)


def test_channel_width_errors(rng):
    ch = CommChannel("g", 3, 2, msg_dim=4, hidden=5, rng=rng)
    with pytest.raises(DimensionError, match="E_g"):
        ch.encode(HiddenStates(nk.Tensor(np.ones((1, 2))), nk.Tensor(np.ones((1, 2)))))
    with pytest.raises(DimensionError, match="D_g"):
        ch.decode(nk.Tensor(np.ones((1, 3))))


def test_add_noise(rng):
    s = nk.Tensor(np.zeros((500, 20)))
    assert add_noise(s, 0.0, rng) is s
    noisy = add_noise(s, 0.2, rng).data
    assert abs(noisy.std() - 0.2) < 0.01
    with pytest.raises(ConfigError):
        add_noise(s, -0.1, rng)
