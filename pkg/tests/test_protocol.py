"""Round-orchestration checks: local-update degenerate cases and a
hand-computed single step, aggregation arithmetic and invariances."""

import numpy as np
import pytest

from fedcam.datasets import generate_synthetic
from fedcam.nn import ClassifierNet, softmax_cross_entropy
from fedcam.params import LayerSpec, ModelParams
from fedcam.protocol import (
    ClientSpec, EmptyAggregationError, RoundError, RoundState, aggregate,
    effective_weights, local_update, run_round,
)

SPECS = (LayerSpec("dense", 2, 2),)


def make(values):
    return ModelParams(SPECS, np.asarray(values, dtype=float))


@pytest.fixture(scope="module")
def small_world():
    ds = generate_synthetic(num_classes=4, samples_per_class=20,
                            noise_sigma=0.05, seed=0, hw=8)
    net = ClassifierNet(in_channels=1, num_classes=4, image_hw=8,
                        conv_channels=(3, 4))
    global_params = net.init_params(seed=1)
    return ds, global_params


# ---------------------------------------------------------------------------
# local updates


def test_zero_epochs_returns_global(small_world):
    ds, g = small_world
    c = ClientSpec(0, "benign", local_epochs=0, shard=np.arange(10))
    out = local_update(c, g, ds, seed=0)
    assert np.array_equal(out.values, g.values)


def test_zero_lr_returns_global(small_world):
    ds, g = small_world
    c = ClientSpec(0, "benign", local_epochs=2, lr=0.0, shard=np.arange(10))
    out = local_update(c, g, ds, seed=0)
    assert np.array_equal(out.values, g.values)


def test_single_sample_single_epoch_matches_hand_step(small_world):
    # one SGD step on one sample: W' = W - lr * grad(CE)
    ds, g = small_world
    c = ClientSpec(0, "benign", local_epochs=1, batch_size=8, lr=0.3,
                   shard=np.array([5]))
    out = local_update(c, g, ds, seed=9)

    net = ClassifierNet.from_params(g, image_hw=8)
    _, dlogits = softmax_cross_entropy(net.forward(ds.images[5]),
                                       ds.labels[5:6])
    want = g.values - 0.3 * net.backward(dlogits).grads
    np.testing.assert_allclose(out.values, want, atol=1e-12)


def test_local_update_deterministic(small_world):
    ds, g = small_world
    c = ClientSpec(2, "benign", local_epochs=2, batch_size=4,
                   shard=np.arange(12))
    a = local_update(c, g, ds, seed=4)
    b = local_update(c, g, ds, seed=4)
    assert np.array_equal(a.values, b.values)


def test_empty_shard_rejected():
    with pytest.raises(ValueError):
        ClientSpec(0, "benign", shard=np.array([], dtype=int))


# ---------------------------------------------------------------------------
# aggregation


def test_equal_sizes_mean():
    out = aggregate([make([0, 0, 0, 0, 0, 0]), make([2, 2, 2, 2, 2, 2])],
                    [10, 10], [True, True])
    np.testing.assert_array_equal(out.values, np.ones(6))


def test_exclusion_renormalizes():
    a, b = make(np.arange(6)), make(np.ones(6))
    out = aggregate([a, b], [10, 30], [False, True])
    np.testing.assert_array_equal(out.values, b.values)


def test_weighted_mean_matches_loop_oracle():
    rng = np.random.default_rng(0)
    uploads = [make(rng.normal(size=6)) for _ in range(3)]
    sizes = [1, 2, 3]
    got = aggregate(uploads, sizes, [True] * 3)
    want = np.zeros(6)
    for u, s in zip(uploads, sizes):
        want += (s / 6) * u.values
    np.testing.assert_allclose(got.values, want, atol=1e-12)


def test_all_excluded_raises():
    with pytest.raises(EmptyAggregationError):
        aggregate([make(np.zeros(6))], [5], [False])


def test_weights_sum_to_one():
    rng = np.random.default_rng(1)
    sizes = rng.integers(50, 150, size=24)
    mask = rng.random(24) < 0.7
    mask[0] = True
    w = effective_weights(sizes, mask)
    assert abs(w.sum() - 1.0) <= 1e-12
    assert np.all(w[~mask] == 0.0)


def test_aggregate_order_invariance():
    rng = np.random.default_rng(2)
    uploads = [make(rng.normal(size=6)) for _ in range(7)]
    sizes = rng.integers(10, 90, size=7)
    mask = np.array([True, True, False, True, True, True, False])
    base = aggregate(uploads, sizes, mask)
    perm = rng.permutation(7)
    permuted = aggregate([uploads[i] for i in perm], sizes[perm], mask[perm])
    np.testing.assert_allclose(base.values, permuted.values, atol=1e-12)


# ---------------------------------------------------------------------------
# round loop


class AllowAll:
    def __call__(self, uploads, t):
        from fedcam.baselines import DefenseVerdict
        return DefenseVerdict(np.ones(len(uploads), dtype=bool), None, "none")


def build_round(ds, g, n_benign, n_attackers):
    clients = [ClientSpec(i, "benign", local_epochs=1, batch_size=8,
                          lr=0.05, shard=np.arange(i * 5, i * 5 + 5))
               for i in range(n_benign)]
    sizes = np.full(n_benign + n_attackers, 5.0)
    state = RoundState(1, g, [], sizes)
    return clients, state


def test_round_without_attackers_is_fedavg(small_world):
    ds, g = small_world
    clients, state = build_round(ds, g, 3, 0)
    next_state, record = run_round(
        state, clients, ds,
        attack_hook=lambda b, g_, t: [],
        defense_hook=AllowAll(), seed=7)
    want = aggregate(next_state.uploads, state.claimed_sizes, [True] * 3)
    np.testing.assert_array_equal(next_state.global_params.values, want.values)
    assert record["t"] == 1 and next_state.t == 2
    assert record["weight_sum"] == pytest.approx(1.0, abs=1e-12)


def test_all_true_mask_equals_no_defense(small_world):
    ds, g = small_world
    results = []
    for hook in (AllowAll(), AllowAll()):
        clients, state = build_round(ds, g, 3, 1)
        nxt, _ = run_round(
            state, clients, ds,
            attack_hook=lambda b, g_, t: [b[0].copy()],
            defense_hook=hook, seed=8)
        results.append(nxt.global_params.values)
    assert np.array_equal(results[0], results[1])


def test_upload_count_matches_population(small_world):
    ds, g = small_world
    clients, state = build_round(ds, g, 4, 2)
    nxt, record = run_round(
        state, clients, ds,
        attack_hook=lambda b, g_, t: [b[0].copy(), b[1].copy()],
        defense_hook=AllowAll(), seed=9)
    assert len(nxt.uploads) == 6
    assert all(u is not None for u in nxt.uploads)
    assert len(record["include_mask"]) == 6


def test_hook_failure_carries_round_index(small_world):
    ds, g = small_world
    clients, state = build_round(ds, g, 3, 1)
    state.t = 13

    def bad_attack(b, g_, t):
        raise RuntimeError("boom")

    with pytest.raises(RoundError) as err:
        run_round(state, clients, ds, bad_attack, AllowAll(), seed=0)
    assert err.value.round_t == 13


def test_empty_aggregation_carries_global_over(small_world):
    ds, g = small_world
    clients, state = build_round(ds, g, 3, 0)

    class DenyAll:
        def __call__(self, uploads, t):
            class V:
                include_mask = np.zeros(len(uploads), dtype=bool)
            return V()

    nxt, record = run_round(state, clients, ds,
                            lambda b, g_, t: [], DenyAll(), seed=1)
    assert record["aggregation_skipped"]
    assert np.array_equal(nxt.global_params.values, g.values)
