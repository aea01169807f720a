import threading

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from hierkl.autodiff import MLPSpec, init_params
from hierkl.errors import ConfigError, NonFiniteError, UsageError
from hierkl.offpolicy import (ReplayBuffer, ReplaySegment, TargetSync, TraceConfig, collate, replay_sample,
                              retrace_targets, traces, vtrace_targets)
from hierkl.oracles import regularized_kstep_return, retrace_bruteforce, vtrace_bruteforce
from hierkl.policy import ObservationBundle

seeds = st.integers(0, 2 ** 32 - 1)


def _segment_arrays(rng, K):
    return dict(q=rng.normal(size=K), v=rng.normal(size=K + 1), kl=rng.exponential(size=K + 1),
                r=rng.normal(size=K), lp=rng.normal(size=K) - 1, lm=rng.normal(size=K) - 1,
                d=(rng.random(K) > 0.2).astype(float))


def test_traces_truncated(rng):
    lp, lm = rng.normal(scale=3, size=500), rng.normal(scale=3, size=500)
    c = traces(lp, lm, 0.9)
    assert np.all(c <= 0.9) and np.all(c >= 0)
    np.testing.assert_allclose(c, 0.9 * np.minimum(1, np.exp(lp - lm)), atol=1e-15)
    # huge ratios do not overflow
    assert traces([1000.0], [-1000.0], 1.0)[0] == 1.0


def test_traces_reject_nonfinite():
    with pytest.raises(NonFiniteError):
        traces([np.nan], [0.0], 1.0)


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seeds, st.integers(1, 12), st.floats(0.0, 1.0))
def test_retrace_matches_bruteforce(backend, seed, K, lam):
    rng = np.random.default_rng(seed)
    a = _segment_arrays(rng, K)
    c = traces(a["lp"], a["lm"], lam)
    got = retrace_targets(a["q"], a["v"], a["kl"], a["r"], 0.95, 0.2, c, a["d"])
    ref = retrace_bruteforce(a["q"], a["v"], a["kl"], a["r"], 0.95, 0.2, c, a["d"])
    np.testing.assert_allclose(got, ref, atol=1e-10)


@settings(max_examples=60, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(seeds, st.integers(1, 12), st.floats(0.1, 2.0), st.floats(0.1, 2.0))
def test_vtrace_matches_bruteforce(backend, seed, K, c_bar, rho_bar):
    rng = np.random.default_rng(seed)
    a = _segment_arrays(rng, K)
    got, rho = vtrace_targets(a["v"], a["kl"], a["r"], 0.95, TraceConfig(1.0, c_bar, rho_bar), a["lp"], a["lm"],
                              a["d"])
    ref, rho_ref = vtrace_bruteforce(a["v"], a["kl"], a["r"], 0.95, c_bar, rho_bar, a["lp"], a["lm"], a["d"])
    np.testing.assert_allclose(got, ref, atol=1e-10)
    np.testing.assert_allclose(rho, rho_ref, atol=1e-15)


def test_retrace_batched_equals_rows(rng):
    B, K = 5, 7
    rows = [_segment_arrays(rng, K) for _ in range(B)]
    stk = {k: np.stack([r[k] for r in rows]) for k in rows[0]}
    c = traces(stk["lp"], stk["lm"], 1.0)
    got = retrace_targets(stk["q"], stk["v"], stk["kl"], stk["r"], 0.9, 0.1, c, stk["d"])
    for i, r in enumerate(rows):
        np.testing.assert_allclose(got[i], retrace_targets(r["q"], r["v"], r["kl"], r["r"], 0.9, 0.1, c[i], r["d"]),
                                   atol=1e-14)


def test_retrace_onpolicy_is_kstep_return(rng):
    K = 6
    a = _segment_arrays(rng, K)
    v = a["v"].copy()
    v[1:-1] = a["q"][1:]
    c = traces(a["lp"], a["lp"], 1.0)
    got = retrace_targets(a["q"], v, a["kl"], a["r"], 0.9, 0.3, c)
    ref = [regularized_kstep_return(a["r"], a["kl"], v[-1], 0.9, 0.3, t) for t in range(K)]
    np.testing.assert_allclose(got, ref, atol=1e-12)


def test_zero_traces_give_one_step_targets(rng):
    a = _segment_arrays(rng, 5)
    got = retrace_targets(a["q"], a["v"], a["kl"], a["r"], 0.9, 0.3, np.zeros(5))
    np.testing.assert_allclose(got, a["r"] + 0.9 * (a["v"][1:] - 0.3 * a["kl"][1:]), atol=1e-14)


def test_terminal_cuts_bootstrap(rng):
    a = _segment_arrays(rng, 4)
    d = np.array([1.0, 1.0, 0.0, 0.0])
    c = np.ones(4)
    got = retrace_targets(a["q"], a["v"], a["kl"], a["r"], 0.9, 0.3, c, d)
    v2 = a["v"].copy()
    v2[3:] += 100.0
    got2 = retrace_targets(a["q"], v2, a["kl"], a["r"], 0.9, 0.3, c, d)
    np.testing.assert_allclose(got[:3], got2[:3], atol=1e-12)


def test_vtrace_mask_zeroes_padding(rng):
    a = _segment_arrays(rng, 5)
    mask = np.array([1, 1, 1, 0, 0.0])
    _, rho = vtrace_targets(a["v"], a["kl"], a["r"], 0.9, TraceConfig(), a["lp"], a["lm"], mask * 1, mask)
    assert np.all(rho[3:] == 0)


def test_length_mismatch_rejected(rng):
    with pytest.raises(ConfigError):
        retrace_targets(np.zeros(3), np.zeros(3), np.zeros(4), np.zeros(3), 0.9, 0.1, np.ones(3))
    with pytest.raises(ConfigError):
        vtrace_targets(np.zeros(4), np.zeros(4), np.zeros(3), 0.9, TraceConfig(), np.zeros(2), np.zeros(2))


@pytest.mark.parametrize("kw", [dict(lam=1.5), dict(c_bar=-1.0), dict(rho_bar=np.inf)])
def test_trace_config_validation(kw):
    with pytest.raises(ConfigError):
        TraceConfig(**kw)


def _seg(K=3, length=3, terminal=False, tag=0.0):
    obs = ObservationBundle({"s": np.full((K + 1, 2), tag)})
    return ReplaySegment(obs, np.zeros(K, dtype=np.int64), np.full(K, tag), np.zeros(K), length, terminal)


def test_segment_validation():
    with pytest.raises(ConfigError):
        ReplaySegment(ObservationBundle({"s": np.zeros((3, 2))}), np.zeros(3), np.zeros(3), np.zeros(3), 3)
    with pytest.raises(ConfigError):
        _seg(length=0)
    with pytest.raises(ConfigError):
        ReplaySegment(ObservationBundle({"s": np.zeros((4, 2))}), np.zeros(3), np.zeros(3),
                      np.array([0.0, np.nan, 0.0]), 3)


def test_segment_discounts_and_mask():
    s = _seg(K=4, length=2, terminal=True)
    np.testing.assert_array_equal(s.mask, [1, 1, 0, 0])
    np.testing.assert_array_equal(s.discounts, [1, 0, 0, 0])
    assert not s.rewards.flags.writeable


def test_replay_fifo_eviction_and_sampling(rng):
    buf = ReplayBuffer(3)
    for i in range(5):
        buf.push(_seg(tag=float(i)))
    assert len(buf) == 3 and buf.pushed == 5
    assert sorted(s.rewards[0] for s in buf.snapshot()) == [2.0, 3.0, 4.0]
    batch = replay_sample(buf, 8, rng)
    assert batch.size == 8 and batch.obs.groups["s"].shape == (8, 4, 2)
    assert set(batch.rewards[:, 0]) <= {2.0, 3.0, 4.0}


def test_replay_pop_oldest():
    buf = ReplayBuffer(4)
    for i in range(3):
        buf.push(_seg(tag=float(i)))
    assert [s.rewards[0] for s in buf.pop_oldest(2)] == [0.0, 1.0]
    assert len(buf) == 1
    buf.pop_oldest(5)
    with pytest.raises(UsageError):
        buf.pop_oldest(1)
    with pytest.raises(UsageError):
        buf.sample(1, np.random.default_rng(0))


def test_replay_rejects_other_types():
    with pytest.raises(ConfigError):
        ReplayBuffer(2).push({"obs": 1})
    with pytest.raises(ConfigError):
        ReplayBuffer(0)


def test_replay_concurrent_producers():
    buf = ReplayBuffer(10000)

    def produce():
        for _ in range(500):
            buf.push(_seg())

    threads = [threading.Thread(target=produce) for _ in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert len(buf) == 2000 and buf.pushed == 2000


def test_collate_rejects_mixed_unrolls():
    with pytest.raises(ConfigError):
        collate([_seg(K=3), _seg(K=4, length=4)])


def test_target_sync_schedule(rng):
    sync = TargetSync(100)
    online = {"net": init_params(MLPSpec((2, 2)), rng)}
    target = {"net": online["net"].copy()}
    synced = [i for i in range(1, 304) if sync.tick(online, target)]
    assert synced == [101, 202, 303]


def test_target_sync_copies_and_isolates(rng):
    sync = TargetSync(1)
    online = {"net": init_params(MLPSpec((2, 2)), rng)}
    target = {"net": online["net"].with_values(np.zeros_like(online["net"].values))}
    assert not sync.tick(online, target)
    assert sync.tick(online, target)
    assert target["net"] == online["net"]
    online["net"] = online["net"].with_values(online["net"].values + 1)
    assert target["net"] != online["net"]
