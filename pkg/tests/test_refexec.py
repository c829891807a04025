import numpy as np
import pytest

from failsafe.core import ModelSpec, SimulationError, ValidationError
from failsafe.placement import (hybrid_placement, make_placement,
                                naive_placement)
from failsafe.recovery import plan_weight_recovery
from failsafe.refexec import (ShardedView, ToyLayerWeights, ToyModelWeights,
                              parallel_forward, permuted_ffn_forward,
                              recovery_equivalence, reference_forward)


def toy_spec(layers=2, heads=4, shards=12, hidden=16):
    return ModelSpec(num_layers=layers, num_kv_heads=heads, num_q_heads=heads,
                     head_dim=4, hidden_dim=hidden,
                     ffn_intermediate_dim=shards * 2, ffn_num_shards=shards)


def rel_dev(a, b):
    return float(np.abs(a - b).max()) / max(1.0, float(np.abs(b).max()))


def test_zero_input_is_fixed_point():
    weights = ToyModelWeights.random(0, num_layers=2, num_heads=2, head_dim=4,
                                     hidden=8, intermediate=8)
    out = reference_forward(weights, np.zeros((4, 8)), [2, 2])
    assert np.abs(out).max() == 0.0


def test_single_token_identity_projections_by_hand():
    # One head, head_dim == hidden == 2, all projections identity: a single
    # token attends only itself, so attention adds x and the FFN adds
    # silu(x + x). Expected values computed from that formula directly.
    eye = np.eye(2)
    lw = ToyLayerWeights(wq=eye[None], wk=eye[None], wv=eye[None], wo=eye[None],
                         w_up=np.eye(2), w_down=np.eye(2))
    weights = ToyModelWeights(hidden=2, num_heads=1, head_dim=2, intermediate=2,
                              layers=[lw])
    x = np.array([[1.0, 2.0]])
    after_attn = x + x
    silu = after_attn / (1.0 + np.exp(-after_attn))
    expected = after_attn + silu
    out = reference_forward(weights, x)
    assert np.allclose(out, expected, atol=1e-15)


def test_concatenated_batch_matches_separate_requests():
    weights = ToyModelWeights.random(7, num_layers=2, num_heads=4, head_dim=4,
                                     hidden=16, intermediate=24)
    rng = np.random.default_rng(7)
    parts = [rng.standard_normal((n, 16)) for n in (3, 1, 4)]
    together = reference_forward(weights, np.vstack(parts), [3, 1, 4])
    separate = [reference_forward(weights, p) for p in parts]
    assert np.allclose(together, np.vstack(separate), atol=1e-12)


def test_hybrid_three_gpus_matches_reference():
    spec = toy_spec(layers=3)
    weights = ToyModelWeights.random(11, num_layers=3, num_heads=4, head_dim=4,
                                     hidden=16, intermediate=24)
    rng = np.random.default_rng(11)
    seq_lens = [2, 3, 2]
    x = rng.standard_normal((7, 16))
    plan = hybrid_placement(spec, range(3), 12)
    routing = {0: 0, 1: 1, 2: 2}  # one request per rank
    out = parallel_forward(weights, plan, routing, x, seq_lens)
    ref = reference_forward(weights, x, seq_lens)
    assert rel_dev(out, ref) <= 1e-10


def test_uniform_eight_gpu_degenerates_to_tp():
    spec = toy_spec(layers=2, heads=8)
    weights = ToyModelWeights.random(5, num_layers=2, num_heads=8, head_dim=4,
                                     hidden=16, intermediate=24)
    rng = np.random.default_rng(5)
    x = rng.standard_normal((4, 16))
    ref = reference_forward(weights, x, [4])
    hybrid = parallel_forward(weights, hybrid_placement(spec, range(8), 12),
                              {0: 0}, x, [4])
    naive = parallel_forward(weights, naive_placement(spec, range(8), 12),
                             {0: 0}, x, [4])
    assert rel_dev(hybrid, ref) <= 1e-10
    assert rel_dev(naive, ref) <= 1e-10


def test_cyclic_and_naive_agree_on_random_instances():
    for seed in range(10):
        spec = toy_spec(layers=3)
        weights = ToyModelWeights.random(seed, num_layers=3, num_heads=4,
                                         head_dim=4, hidden=16, intermediate=24)
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((5, 16))
        ref = reference_forward(weights, x, [5])
        for mode in ("naive", "cyclic"):
            plan = make_placement(mode, spec, range(3), 12)
            out = parallel_forward(weights, plan, {0: 0}, x, [5])
            assert rel_dev(out, ref) <= 1e-10


def test_hybrid_requires_routing():
    spec = toy_spec()
    weights = ToyModelWeights.random(1, num_layers=2, num_heads=4, head_dim=4,
                                     hidden=16, intermediate=24)
    plan = hybrid_placement(spec, range(3), 12)
    x = np.zeros((2, 16))
    with pytest.raises(ValidationError):
        parallel_forward(weights, plan, None, x, [2])
    with pytest.raises(ValidationError):
        parallel_forward(weights, plan, {0: 0}, x, [1, 1])


def test_permutation_identity_is_bitwise():
    weights = ToyModelWeights.random(3, num_layers=1, num_heads=2, head_dim=4,
                                     hidden=10, intermediate=6)
    lw = weights.layers[0]
    x = np.random.default_rng(3).standard_normal((4, 10))
    base = permuted_ffn_forward(lw, np.arange(6), x)
    again = permuted_ffn_forward(lw, np.arange(6), x)
    assert np.array_equal(base, again)


def test_permutation_reversal_within_tolerance():
    weights = ToyModelWeights.random(4, num_layers=1, num_heads=2, head_dim=4,
                                     hidden=10, intermediate=4)
    lw = weights.layers[0]
    x = np.random.default_rng(4).standard_normal((3, 10))
    base = permuted_ffn_forward(lw, np.arange(4), x)
    rev = permuted_ffn_forward(lw, np.arange(4)[::-1], x)
    assert np.abs(rev - base).max() <= 1e-12


def test_permutation_random_seeds():
    for seed in range(25):
        weights = ToyModelWeights.random(seed, num_layers=1, num_heads=2,
                                         head_dim=4, hidden=10, intermediate=12)
        lw = weights.layers[0]
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((4, 10))
        base = permuted_ffn_forward(lw, np.arange(12), x)
        out = permuted_ffn_forward(lw, rng.permutation(12), x)
        assert np.abs(out - base).max() <= 1e-12


def test_non_bijective_permutation_rejected():
    weights = ToyModelWeights.random(2, num_layers=1, num_heads=2, head_dim=4,
                                     hidden=10, intermediate=4)
    with pytest.raises(ValidationError):
        permuted_ffn_forward(weights.layers[0], [0, 0, 1, 2], np.zeros((1, 10)))


def test_sharded_view_reassembles_exactly():
    spec = toy_spec()
    weights = ToyModelWeights.random(9, num_layers=2, num_heads=4, head_dim=4,
                                     hidden=16, intermediate=24)
    for mode in ("naive", "cyclic", "hybrid"):
        view = ShardedView(weights, make_placement(mode, spec, range(3), 12))
        rebuilt = view.reassemble()
        for orig, back in zip(weights.layers, rebuilt.layers):
            for name in ("wq", "wk", "wv", "wo", "w_up", "w_down"):
                assert np.array_equal(getattr(orig, name), getattr(back, name))


def test_tp4_to_tp3_recovery_equivalence():
    spec = toy_spec(layers=2)
    weights = ToyModelWeights.random(21, num_layers=2, num_heads=4, head_dim=4,
                                     hidden=16, intermediate=24)
    old_plan = naive_placement(spec, range(4), 12)
    plan = plan_weight_recovery(spec, old_plan, [0, 1, 2], "on_demand")
    rng = np.random.default_rng(21)
    x = rng.standard_normal((5, 16))
    assert recovery_equivalence(weights, old_plan, plan, {0: 0, 1: 1}, x, [3, 2])


def test_recovery_mutation_detected():
    spec = toy_spec(layers=2)
    weights = ToyModelWeights.random(22, num_layers=2, num_heads=4, head_dim=4,
                                     hidden=16, intermediate=24)
    old_plan = naive_placement(spec, range(4), 12)
    plan = plan_weight_recovery(spec, old_plan, [0, 1, 2], "on_demand")
    plan.transfers = plan.transfers[:-1]  # lose one delivery
    with pytest.raises(SimulationError):
        recovery_equivalence(weights, old_plan, plan, {0: 0}, np.zeros((2, 16)), [2])


def test_routing_choice_does_not_change_output():
    spec = toy_spec(layers=2)
    weights = ToyModelWeights.random(30, num_layers=2, num_heads=4, head_dim=4,
                                     hidden=16, intermediate=24)
    plan = hybrid_placement(spec, range(3), 12)
    rng = np.random.default_rng(30)
    x = rng.standard_normal((6, 16))
    seq_lens = [2, 2, 2]
    outs = [parallel_forward(weights, plan, routing, x, seq_lens)
            for routing in ({0: 0, 1: 1, 2: 2}, {0: 2, 1: 0, 2: 1},
                            {0: 1, 1: 1, 2: 1})]
    assert rel_dev(outs[1], outs[0]) <= 1e-10
    assert rel_dev(outs[2], outs[0]) <= 1e-10
