import numpy as np
import pytest

from branchycsi import ops
from branchycsi.gradcheck import finite_diff_check
from branchycsi.nn import (
    BuildError,
    CheckpointFormatError,
    GhostBottleneck,
    GhostBottleneckCfg,
    GhostModule,
    GhostModuleCfg,
    IncompleteCheckpointError,
    SqueezeExcite,
    TopologyMismatchError,
    build_branchy_ghostnet,
    count_layers,
    count_macs,
    load_weights,
    path_macs,
    save_weights,
    to_model_input,
)
from branchycsi.nn.branchy import MAC_BUDGET
from branchycsi.nn.checkpoint import read_checkpoint
from branchycsi.tensor import DimensionError, Tensor

from conftest import build_tiny


@pytest.fixture(scope="module")
def default_model():
    return build_branchy_ghostnet()


def test_default_structure(default_model):
    assert tuple(count_layers(default_model)) == (97, 2)
    macs = count_macs(default_model)
    assert MAC_BUDGET[0] <= macs <= MAC_BUDGET[1]
    p = path_macs(default_model)
    assert p["early"] < p["full"] and p["early"] / p["full"] <= 0.6


def test_strict_build_rejects_other_structures():
    with pytest.raises(BuildError):
        build_branchy_ghostnet(1.35, branch_point=6, stages=(((3, 16, 16, 0, 1),),))
    with pytest.raises(BuildError):
        build_branchy_ghostnet(0.0, strict=False)
    with pytest.raises(BuildError):
        build_branchy_ghostnet(1.0, branch_point=12, strict=False)


def test_width_changes_macs_not_layer_count():
    small = build_branchy_ghostnet(0.25, strict=False)
    assert tuple(count_layers(small)) == (97, 2)
    assert count_macs(small) < count_macs(build_branchy_ghostnet(1.35))


def test_mac_count_matches_traced_forward(tiny_model):
    """Accounting derived from shapes must match counting during a real forward pass."""
    from branchycsi.tensor import profile

    x = to_model_input(np.zeros((1, 12, 16), np.float32))
    tiny_model.eval()
    with profile() as prof:
        tiny_model.forward_full(x)
    assert prof.macs == count_macs(tiny_model)


def test_ghost_module_shapes(rng):
    for ratio in (1, 2, 3):
        cfg = GhostModuleCfg(6, 5, ratio=ratio)
        m = GhostModule(cfg, rng=rng)
        out = m(Tensor(rng.standard_normal((2, 6, 5, 7)).astype(np.float32)))
        assert out.shape == (2, 5 * ratio, 5, 7) and cfg.out_channels == 5 * ratio


def test_squeeze_excite_gates_in_unit_interval(rng):
    se = SqueezeExcite(8, rng=rng)
    x = Tensor(np.abs(rng.standard_normal((2, 8, 4, 4))).astype(np.float32))
    out = se(x)
    ratio = out.data / np.where(x.data == 0, 1, x.data)
    assert out.shape == x.shape and ratio.min() >= 0 and ratio.max() <= 1 + 1e-6


def test_bottleneck_stride_and_residual(rng):
    cfg = GhostBottleneckCfg.from_channels(8, 16, 12, dw_kernel=3, stride=2, se_reduction=4)
    block = GhostBottleneck(cfg, rng=rng)
    out = block(Tensor(rng.standard_normal((2, 8, 9, 10)).astype(np.float32)))
    assert out.shape == (2, 12, 5, 5)


def test_forward_shapes_and_input_contract(tiny_model):
    rod, har = tiny_model.forward_full(to_model_input(np.zeros((3, 12, 16))))
    assert rod.shape == (3, 3) and har.shape == (3, 5)
    with pytest.raises(DimensionError):
        tiny_model.forward_full(to_model_input(np.zeros((1, 12, 15))))
    with pytest.raises(DimensionError):
        tiny_model.forward_with_exit(to_model_input(np.zeros((2, 12, 16))))


def _force_rod(model, label):
    """Bias the early classifier so the ROD argmax is ``label`` for any input."""
    fc = model.early_head.classifier
    fc.weight.data[...] = 0
    fc.bias.data[...] = 0
    fc.bias.data[label] = 10.0


@pytest.mark.parametrize("label,early", [(0, True), (1, False), (2, True)])
def test_exit_rule(tiny_model, label, early):
    _force_rod(tiny_model, label)
    tiny_model.eval()
    out = tiny_model.forward_with_exit(to_model_input(np.random.default_rng(0).random((12, 16))))
    assert out.rod_label == label and out.exited_early is early
    assert (out.har_label is None) is early and (out.har_probs is None) is early
    assert out.rod_probs.sum() == pytest.approx(1.0)
    assert set(out.stage_timings) == ({"shared", "early_head"} if early else {"shared", "early_head", "rest_and_final"})


def test_forced_paths(tiny_model):
    _force_rod(tiny_model, 0)
    x = to_model_input(np.zeros((12, 16)))
    assert tiny_model.forward_with_exit(x, "full").har_label is not None
    _force_rod(tiny_model, 1)
    assert tiny_model.forward_with_exit(x, "early").exited_early
    with pytest.raises(ValueError):
        tiny_model.forward_with_exit(x, "sometimes")


def test_gradcheck_two_bottleneck_network():
    model = build_tiny(seed=3).to(np.float64)
    model.train()
    rng = np.random.default_rng(5)
    x = Tensor(rng.random((3, 3, 12, 16)), dtype=np.float64)
    snapshot = {k: v.copy() for k, v in model.state_dict().items()}

    def loss():
        # restore running statistics so every evaluation sees the same state
        for name, buf in model.named_buffers():
            buf[...] = snapshot[name]
        rod, har = model.forward_full(x)
        return ops.add(ops.softmax_cross_entropy(rod, [0, 1, 2]), ops.softmax_cross_entropy(har, [1, 4, 2]))

    assert finite_diff_check(loss, model.parameters(), h=1e-5, samples_per_param=3) < 1e-4


# checkpoints -------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_identical(tmp_path, tiny_model):
    tiny_model.train()
    tiny_model.forward_full(to_model_input(np.random.default_rng(0).random((2, 12, 16))))  # move BN stats
    path = tmp_path / "m.bgcn"
    save_weights(tiny_model, path)
    loaded = load_weights(path)
    a, b = tiny_model.state_dict(), loaded.state_dict()
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].tobytes() == b[k].tobytes(), k
    save_weights(loaded, tmp_path / "again.bgcn")
    assert path.read_bytes() == (tmp_path / "again.bgcn").read_bytes()


def test_checkpoint_rejects_other_topology(tmp_path, tiny_model):
    path = tmp_path / "m.bgcn"
    save_weights(tiny_model, path)
    other = build_tiny(early_hidden=11)
    with pytest.raises(TopologyMismatchError):
        load_weights(path, other)


def test_checkpoint_corruption_is_typed(tmp_path, tiny_model):
    path = tmp_path / "m.bgcn"
    save_weights(tiny_model, path)
    blob = path.read_bytes()
    (tmp_path / "magic.bgcn").write_bytes(b"XXXX" + blob[4:])
    (tmp_path / "short.bgcn").write_bytes(blob[: len(blob) // 2])
    for name in ("magic.bgcn", "short.bgcn"):
        with pytest.raises(CheckpointFormatError):
            load_weights(tmp_path / name)
    config, _, tensors = read_checkpoint(path)
    assert config == tiny_model.config and len(tensors) == len(tiny_model.state_dict())


def test_incomplete_checkpoint(tmp_path, tiny_model, monkeypatch):
    state = tiny_model.state_dict()
    dropped = next(iter(state))
    monkeypatch.setattr(type(tiny_model), "state_dict",
                        lambda self: {k: v for k, v in state.items() if k != dropped})
    path = tmp_path / "partial.bgcn"
    save_weights(tiny_model, path)
    monkeypatch.undo()
    with pytest.raises((IncompleteCheckpointError, TopologyMismatchError)):
        load_weights(path, build_tiny())


def test_loaded_parameters_are_writable(tmp_path):
    from branchycsi.nn import build_branchy_ghostnet, load_weights, save_weights

    path = tmp_path / "w.bgcn"
    save_weights(build_branchy_ghostnet(0.25, strict=False, seed=0), path)
    model = load_weights(path)
    assert all(p.data.flags.writeable and p.data.flags.c_contiguous for p in model.parameters())
