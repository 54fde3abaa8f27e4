"""Codebook unit tests: quantization, disturbance, and EMA updates.

The two oracles here are deliberately primitive: a per-slot python scan
for nearest-cluster search and a pure-scalar replay for the EMA
recurrences. The implementation must match them, not the other way
around.
"""

import math
import threading

import numpy as np
import pytest

from streamvq import (
    Codebook,
    DimensionMismatchError,
    EmptyClusterError,
)
from streamvq.codebook import EMPTY_COUNTER


def scan_oracle(counters, weights, v, s, disturbance=True):
    """Exhaustive scan over every slot, scalar math only.

    Returns (best index, discounted distance, raw distance) under the
    lowest-index tie-break. Empty slots have discounted distance 0.
    """
    K = len(counters)
    mean = sum(counters) / K
    best = None
    for k in range(K):
        if counters[k] <= EMPTY_COUNTER:
            disc, raw = 0.0, 0.0
        else:
            e = np.asarray(weights[k]) / counters[k]
            raw = float(((e - v) ** 2).sum())
            if disturbance and mean > 0:
                r = min(counters[k] / mean * s, 1.0)
            else:
                r = 1.0
            disc = raw * r
        if best is None or disc < best[1]:
            best = (k, disc, raw)
    return best


def scalar_replay(K, dim, alpha, beta, eta, updates):
    """Replay the decaying EMA recurrences with python floats.

    Every update step decays all slots by alpha and folds the item into
    its slot; unhit slots decay lazily through a per-slot stamp. The
    returned state is materialized at the final step, matching what the
    codebook exports.
    """
    w = [[0.0] * dim for _ in range(K)]
    c = [0.0] * K
    stamp = [0] * K
    t = 0
    for k, v, delta, rewards in updates:
        t += 1
        weight = delta**beta
        if rewards is not None:
            for h, e in zip(rewards, eta):
                weight *= (1.0 + h) ** e
        decay = alpha ** float(t - stamp[k])
        gain = (1.0 - alpha) * weight
        c[k] = c[k] * decay + gain
        for j in range(dim):
            w[k][j] = w[k][j] * decay + gain * v[j]
        stamp[k] = t
    for k in range(K):
        decay = alpha ** float(t - stamp[k])
        c[k] *= decay
        for j in range(dim):
            w[k][j] *= decay
    return np.array(w), np.array(c)


def random_codebook(rng, K, dim, **kwargs):
    cb = Codebook(K, dim, **kwargs)
    cb._state[:, 0] = rng.uniform(0.1, 3.0, K)
    cb._state[:, 1:-1] = rng.normal(size=(K, dim)) * cb._state[:, :1]
    return cb


# -- construction and representation -------------------------------------------


def test_constructor_validation():
    with pytest.raises(ValueError):
        Codebook(0, 4)
    with pytest.raises(ValueError):
        Codebook(4, 0)
    with pytest.raises(ValueError):
        Codebook(4, 4, alpha=1.0)
    with pytest.raises(ValueError):
        Codebook(4, 4, alpha=0.0)
    with pytest.raises(ValueError):
        Codebook(4, 4, s=0.0)
    with pytest.raises(ValueError):
        Codebook(4, 4, beta=-0.1)
    with pytest.raises(ValueError):
        Codebook(4, 4, eta=[-1.0])


def test_cluster_embedding_is_w_over_c():
    cb = Codebook(4, 2)
    cb._state[1, :-1] = [2.0, 2.0, 4.0]
    assert np.allclose(cb.cluster_embedding(1), [1.0, 2.0])
    cb._state[2, :-1] = [1.0, 0.0, 0.0]
    assert np.allclose(cb.cluster_embedding(2), [0.0, 0.0])


def test_cluster_embedding_empty_slot_raises_distinct_error():
    cb = Codebook(4, 2)
    with pytest.raises(EmptyClusterError) as err:
        cb.cluster_embedding(0)
    assert err.value.cluster_id == 0
    with pytest.raises(IndexError):
        cb.cluster_embedding(4)


def test_cluster_embedding_matches_replay_after_updates():
    rng = np.random.default_rng(0)
    cb = Codebook(6, 3, alpha=0.95, beta=0.5)
    updates = []
    for _ in range(500):
        k = int(rng.integers(6))
        v = rng.normal(size=3)
        d = float(rng.integers(1, 50))
        cb.ema_update(k, v, d)
        updates.append((k, v, d, None))
    w, c = scalar_replay(6, 3, 0.95, 0.5, None, updates)
    for k in range(6):
        np.testing.assert_allclose(cb.cluster_embedding(k), w[k] / c[k], rtol=1e-9)


# -- disturbance factor ---------------------------------------------------------


def test_disturbance_equal_counters_is_one():
    cb = Codebook(8, 2, s=5.0)
    cb._state[:, 0] = 0.7
    assert np.allclose(cb.disturbance_factor(), 1.0)


def test_disturbance_zero_counter_is_zero():
    cb = Codebook(4, 2, s=5.0)
    cb._state[:, 0] = [1.0, 0.0, 1.0, 1.0]
    assert cb.disturbance_factor(1) == 0.0


def test_disturbance_tenth_of_average_with_s5():
    cb = Codebook(2, 2, s=5.0)
    # slot 0 at one tenth of the average: r = min(0.1 * 5, 1) = 0.5
    cb._state[:, 0] = [1.0, 19.0]  # mean 10, slot 0 ratio 0.1
    assert cb.disturbance_factor(0) == pytest.approx(0.5)


def test_disturbance_all_zero_counters_is_one_everywhere():
    cb = Codebook(5, 2)
    assert np.allclose(cb.disturbance_factor(), 1.0)


# -- quantize -------------------------------------------------------------------


def test_quantize_single_initialized_cluster():
    cb = Codebook(1, 2)
    cb._state[0, :-1] = [2.0, 2.0, 6.0]  # e = (1, 3)
    q = cb.quantize([0.0, 0.0])
    assert q.cluster_id == 0
    assert q.raw_distance == pytest.approx(10.0)


def test_quantize_exact_match_with_equal_counters():
    rng = np.random.default_rng(1)
    cb = Codebook(8, 4)
    cb._state[:, 0] = 1.0
    cb._state[:, 1:-1] = rng.normal(size=(8, 4))
    v = cb.cluster_embedding(3)
    q = cb.quantize(v)
    assert q.cluster_id == 3
    assert q.discounted_distance == pytest.approx(0.0, abs=1e-12)


def test_quantize_dimension_mismatch():
    cb = Codebook(2, 3)
    with pytest.raises(DimensionMismatchError):
        cb.quantize([1.0, 2.0])


def test_quantize_matches_scan_oracle():
    rng = np.random.default_rng(7)
    cb = random_codebook(rng, 8, 4)
    for _ in range(1000):
        v = rng.normal(size=4)
        q = cb.quantize(v)
        k, disc, raw = scan_oracle(cb.counters(), cb.weights(), v, cb.s)
        assert q.cluster_id == k
        assert q.discounted_distance == pytest.approx(disc, rel=1e-9, abs=1e-12)
        assert q.raw_distance == pytest.approx(raw, rel=1e-9, abs=1e-12)


def test_quantize_matches_oracle_with_disturbance_off():
    rng = np.random.default_rng(8)
    cb = random_codebook(rng, 16, 4, disturbance=False)
    for _ in range(300):
        v = rng.normal(size=4)
        q = cb.quantize(v)
        k, disc, raw = scan_oracle(cb.counters(), cb.weights(), v, cb.s, False)
        assert q.cluster_id == k
        assert q.discounted_distance == pytest.approx(q.raw_distance)


def test_quantize_discount_never_exceeds_raw():
    rng = np.random.default_rng(9)
    cb = random_codebook(rng, 12, 3)
    for _ in range(200):
        q = cb.quantize(rng.normal(size=3))
        assert q.discounted_distance <= q.raw_distance + 1e-15


def test_quantize_prefers_empty_slot():
    rng = np.random.default_rng(2)
    cb = Codebook(4, 2)
    cb._state[0, :-1] = [1.0, 5.0, 5.0]
    cb._state[2, :-1] = [1.0, -5.0, -5.0]
    q = cb.quantize(rng.normal(size=2))
    assert q.cluster_id == 1  # first empty slot wins over any positive distance
    assert q.discounted_distance == 0.0


def test_quantize_exact_match_beats_later_empty_slot():
    cb = Codebook(4, 2)
    cb._state[0, :-1] = [1.0, 1.0, 2.0]  # e = (1, 2)
    q = cb.quantize([1.0, 2.0])
    assert q.cluster_id == 0


def test_quantize_fresh_codebook_routes_to_slot_zero():
    cb = Codebook(4, 2)
    q = cb.quantize([3.0, 4.0])
    assert q.cluster_id == 0
    assert q.discounted_distance == 0.0


def test_lazy_seeding_adopts_item_embeddings():
    # Stream distinct items into a fresh codebook: each should claim the
    # next slot and the slot's embedding should equal the item exactly.
    rng = np.random.default_rng(3)
    cb = Codebook(5, 3, alpha=0.9, beta=0.5)
    vs = rng.normal(size=(5, 3))
    for i in range(5):
        q = cb.quantize(vs[i])
        assert q.cluster_id == i
        cb.ema_update(q.cluster_id, vs[i], 17.0)
        np.testing.assert_allclose(cb.cluster_embedding(i), vs[i], rtol=1e-12)


def test_monotone_boost_starving_only_attracts():
    # Scaling (w, c) of one slot down together keeps e fixed and lowers c:
    # its discounted distance to any probe must not increase.
    rng = np.random.default_rng(4)
    for _ in range(50):
        cb = random_codebook(rng, 8, 4)
        v = rng.normal(size=4)
        k = int(rng.integers(8))
        before = cb.quantize(v)
        d_before = (
            float(((cb.cluster_embedding(k) - v) ** 2).sum())
            * cb.disturbance_factor(k)
        )
        cb._state[k] *= float(rng.uniform(0.05, 0.95))
        d_after = (
            float(((cb.cluster_embedding(k) - v) ** 2).sum())
            * cb.disturbance_factor(k)
        )
        assert d_after <= d_before + 1e-12


# -- EMA updates -----------------------------------------------------------------


def test_ema_single_step_arithmetic():
    cb = Codebook(1, 2, alpha=0.9, beta=0.0)
    cb.ema_update(0, [1.0, 1.0], 1.0)
    c, w = cb._state[0, 0], cb._state[0, 1:-1]
    assert c == pytest.approx(0.1)
    np.testing.assert_allclose(w, [0.1, 0.1])


def test_ema_multi_task_single_step():
    cb = Codebook(1, 2, alpha=0.9, beta=0.0, eta=[1.0])
    cb.ema_update(0, [1.0, 0.0], 1.0, rewards=[1.0])
    c, w = cb._state[0, 0], cb._state[0, 1:-1]
    assert c == pytest.approx(0.2)  # (1 - 0.9) * (1 + 1)^1
    np.testing.assert_allclose(w, [0.2, 0.0])


def test_ema_fixed_point_is_input_for_any_beta():
    for beta in (0.0, 0.5, 2.0):
        cb = Codebook(1, 2, alpha=0.9, beta=beta)
        v = np.array([2.0, -1.0])
        for _ in range(400):
            cb.ema_update(0, v, 7.0)
        np.testing.assert_allclose(cb.cluster_embedding(0), v, rtol=1e-10)


def test_ema_validation_errors():
    cb = Codebook(2, 2, eta=[1.0, 0.5])
    with pytest.raises(ValueError):
        cb.ema_update(0, [1.0, 1.0], 0.0)
    with pytest.raises(ValueError):
        cb.ema_update(0, [1.0, 1.0], -3.0)
    with pytest.raises(ValueError):
        cb.ema_update(0, [1.0, 1.0], 1.0, rewards=[-0.5, 1.0])
    with pytest.raises(ValueError):
        cb.ema_update(0, [1.0, 1.0], 1.0, rewards=[1.0])  # wrong task count
    with pytest.raises(DimensionMismatchError):
        cb.ema_update(0, [1.0], 1.0)
    with pytest.raises(IndexError):
        cb.ema_update(5, [1.0, 1.0], 1.0)
    single = Codebook(2, 2)
    with pytest.raises(ValueError):
        single.ema_update(0, [1.0, 1.0], 1.0, rewards=[1.0])


def test_ema_replay_equivalence_mixed_tasks():
    rng = np.random.default_rng(5)
    eta = [1.0, 0.3]
    cb = Codebook(16, 4, alpha=0.99, beta=0.5, eta=eta)
    updates = []
    for _ in range(5000):
        k = int(rng.integers(16))
        v = rng.normal(size=4)
        d = float(rng.integers(1, 1000))
        rewards = rng.uniform(0.0, 3.0, 2) if rng.random() < 0.5 else None
        cb.ema_update(k, v, d, rewards)
        updates.append((k, v, d, rewards))
    w, c = scalar_replay(16, 4, 0.99, 0.5, eta, updates)
    np.testing.assert_allclose(cb.counters(), c, rtol=1e-9)
    np.testing.assert_allclose(cb.weights(), w, rtol=1e-9)


def test_ema_convex_combination_under_constant_weighting():
    # With constant delta and no rewards, e[k] is a convex combination of
    # the items ever folded into k, so it stays inside their bounding box.
    rng = np.random.default_rng(6)
    cb = Codebook(1, 3, alpha=0.97, beta=0.5)
    items = rng.normal(size=(100, 3))
    for v in items:
        cb.ema_update(0, v, 5.0)
    e = cb.cluster_embedding(0)
    assert (e >= items.min(axis=0) - 1e-12).all()
    assert (e <= items.max(axis=0) + 1e-12).all()


# -- batch quantization ------------------------------------------------------------


def test_quantize_batch_matches_single_on_initialized_codebook():
    rng = np.random.default_rng(10)
    cb = random_codebook(rng, 32, 8)
    V = rng.normal(size=(200, 8))
    ids, e_batch, disc, raw = cb.quantize_batch(V)
    for o in range(200):
        q = cb.quantize(V[o])
        assert ids[o] == q.cluster_id
        assert disc[o] == pytest.approx(q.discounted_distance, rel=1e-12, abs=1e-15)
        assert raw[o] == pytest.approx(q.raw_distance, rel=1e-12, abs=1e-15)
        np.testing.assert_allclose(e_batch[o], cb.cluster_embedding(q.cluster_id))


def test_quantize_batch_seeds_distinct_slots():
    rng = np.random.default_rng(11)
    cb = Codebook(8, 3)
    V = rng.normal(size=(5, 3))
    ids, e_batch, disc, raw = cb.quantize_batch(V)
    assert list(ids) == [0, 1, 2, 3, 4]
    assert np.all(disc == 0.0)
    np.testing.assert_array_equal(e_batch, V)


def test_quantize_batch_duplicate_items_share_a_claimed_slot():
    cb = Codebook(8, 2)
    v = np.array([1.0, 2.0])
    V = np.stack([v, v, v * 3])
    ids, _, _, _ = cb.quantize_batch(V)
    assert ids[0] == ids[1] == 0
    assert ids[2] == 1


def test_quantize_batch_cold_batch_wider_than_codebook():
    rng = np.random.default_rng(12)
    cb = Codebook(3, 2)
    V = rng.normal(size=(7, 2))
    ids, e_batch, _, _ = cb.quantize_batch(V)
    assert set(ids[:3]) == {0, 1, 2}
    assert ((ids >= 0) & (ids < 3)).all()
    # overflow rows landed on the nearest claimed slot
    for o in range(3, 7):
        dists = ((V[:3] - V[o]) ** 2).sum(axis=1)
        assert ids[o] == ids[int(np.argmin(dists))]


def test_quantize_batch_empty_batch():
    cb = Codebook(3, 2)
    ids, e, disc, raw = cb.quantize_batch(np.empty((0, 2)))
    assert ids.shape == (0,)
    assert e.shape == (0, 2)


# -- concurrency smoke -------------------------------------------------------------


def test_concurrent_readers_see_consistent_pairs():
    # One writer streams updates while readers quantize; readers must
    # never observe an impossible state (exceptions or negative
    # distances would indicate a torn (w, c) pair).
    rng = np.random.default_rng(13)
    cb = Codebook(16, 4)
    for k in range(16):
        cb.ema_update(k, rng.normal(size=4), 2.0)
    stop = threading.Event()
    errors = []

    def reader():
        r = np.random.default_rng(99)
        while not stop.is_set():
            try:
                q = cb.quantize(r.normal(size=4))
                assert 0 <= q.cluster_id < 16
                assert q.discounted_distance >= 0.0
                e = cb.cluster_embedding(q.cluster_id)
                assert np.isfinite(e).all()
            except Exception as exc:  # pragma: no cover - failure path
                errors.append(exc)
                return

    threads = [threading.Thread(target=reader) for _ in range(4)]
    for t in threads:
        t.start()
    for _ in range(4000):
        cb.ema_update(int(rng.integers(16)), rng.normal(size=4), float(rng.integers(1, 9)))
    stop.set()
    for t in threads:
        t.join()
    assert not errors
