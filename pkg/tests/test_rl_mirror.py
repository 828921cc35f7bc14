import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vlkit import rl_mirror as rl


def _item(rng, n=4, T=3, rewards=None, shift=0.0):
    lp_ref = [rng.normal(size=T) - 2 for _ in range(n)]
    return rl.RlItem("p", "12", ["r"] * n, [a + shift for a in lp_ref], lp_ref,
                     rewards if rewards is not None else rng.integers(0, 2, n), np.full(n, 10))


def test_seq_kl_examples():
    a = np.log([0.2, 0.5, 0.3])
    assert rl.seq_kl(a, a) == 0.0
    assert rl.seq_kl(np.zeros(5) + 0.1, np.zeros(5)) == pytest.approx(0.5)
    with pytest.raises(ValueError):
        rl.seq_kl(np.zeros(3), np.zeros(4))


def test_seq_kl_enumeration_matches_closed_form():
    p, q = np.array([0.7, 0.3]), np.array([0.4, 0.6])
    est = sum(p[a] * rl.seq_kl([math.log(p[a])], [math.log(q[a])]) for a in range(2))
    assert est == pytest.approx(float((p * np.log(p / q)).sum()), rel=1e-12)


def test_item_validation(rng):
    with pytest.raises(ValueError, match="binary"):
        _item(rng, rewards=np.array([0, 1, 0.5, 1]))
    with pytest.raises(ValueError, match="finite"):
        rl.RlItem("p", "1", ["a"], [np.array([-np.inf])], [np.array([0.0])], [1], [1])
    with pytest.raises(ValueError):
        rl.RlItem("p", "1", ["a"], [np.zeros(1)], [np.zeros(1)], [1], [1], success_rate=1.5)
    with pytest.raises(ValueError):
        rl.RlBatch([])


def test_config_validation():
    with pytest.raises(ValueError):
        rl.MirrorConfig(tau=0.0)
    with pytest.raises(ValueError):
        rl.MirrorConfig(min_len=10, max_len=5)


def test_objective_equal_policies_is_mean_reward(rng):
    batch = rl.RlBatch([_item(rng), _item(rng)])
    cfg = rl.MirrorConfig(tau=0.3, min_len=64)
    obj, _ = rl.mirror_objective(batch, cfg)
    assert obj == np.mean(np.concatenate([it.rewards for it in batch.items]))


def test_objective_small_tau(rng):
    batch = rl.RlBatch([_item(rng, shift=0.2)])
    obj, _ = rl.mirror_objective(batch, rl.MirrorConfig(tau=1e-12))
    assert obj == pytest.approx(batch.items[0].rewards.mean(), abs=1e-10)


def test_objective_signal_formula(rng):
    it = _item(rng, shift=0.1)
    cfg = rl.MirrorConfig(tau=0.5, baseline="none")
    obj, (sig,) = rl.mirror_objective(rl.RlBatch([it]), cfg)
    np.testing.assert_allclose(sig, it.rewards - 0.5 * 0.3)
    assert obj == pytest.approx(it.rewards.mean() - 0.5 * 0.3)


def test_objective_rejects_nonpositive_tau(rng):
    cfg = rl.MirrorConfig()
    cfg.tau = -1.0
    with pytest.raises(ValueError):
        rl.mirror_objective(rl.RlBatch([_item(rng)]), cfg)


def test_large_tau_signal_vanishes_at_reference(rng):
    it = _item(rng, rewards=np.array([1, 0, 1, 0]))
    _, (sig,) = rl.mirror_objective(rl.RlBatch([it]), rl.MirrorConfig(tau=1e6))
    assert np.abs(sig / 1e6).max() < 1e-6  # update magnitude scales with signal / tau


@pytest.mark.parametrize("probs", [[0.5, 0.5], [0.2, 0.8], [0.9, 0.1]])
def test_bandit_step_matches_closed_form(probs):
    got = rl.exact_bandit_step(probs, [1.0, 0.0], tau=0.5)
    want = rl.closed_form_bandit_step(probs, [1.0, 0.0], tau=0.5)
    np.testing.assert_allclose(got, want, atol=1e-6)
    assert got[0] > probs[0]


def test_length_shaping_examples():
    cfg = rl.MirrorConfig(min_len=64, max_len=256, weight=0.5)
    assert rl.length_shaped_reward(1.0, 64, cfg) == 1.0
    assert rl.length_shaped_reward(1.0, 10, cfg) == 1.0
    assert rl.length_shaped_reward(1.0, 256, cfg) == 0.5
    assert rl.length_shaped_reward(1.0, 160, cfg) == pytest.approx(0.75)
    assert rl.length_shaped_reward(1.0, 5000, cfg) == 0.5


def test_length_shaping_never_rewards_failure():
    for lo, hi in [(1, 1), (1, 8), (64, 256), (100, 101)]:
        for w in (0.0, 0.25, 1.0):
            cfg = rl.MirrorConfig(min_len=lo, max_len=hi, weight=w)
            for n in range(1, 2 * hi + 2):
                assert rl.length_shaped_reward(0.0, n, cfg) <= 0.0


def test_logz_baseline_is_soft_max():
    r = np.array([1.0, 0.0, 0.0, 1.0])
    b = rl.group_baseline(r, 0.1, "logz")
    assert b == pytest.approx(0.1 * math.log(np.mean(np.exp(r / 0.1))), rel=1e-12)
    assert rl.group_baseline(r, 0.1, "mean") == 0.5 and rl.group_baseline(r, 0.1, "none") == 0.0


def test_prioritized_weights():
    np.testing.assert_allclose(rl.prioritized_weights([1.0, 0.5, 0.0]), [0, 1 / 3, 2 / 3])
    np.testing.assert_allclose(rl.prioritized_weights([0.3] * 4), [0.25] * 4)
    np.testing.assert_allclose(rl.prioritized_weights([1.0] * 3), [1 / 3] * 3)


def test_curriculum_shifts_from_easy_to_hard():
    w0 = rl.curriculum_weights([0.0, 1.0], 0.0)
    w1 = rl.curriculum_weights([0.0, 1.0], 1.0)
    assert w0[0] >= w0[1] and w1[1] >= w1[0]


@given(st.sampled_from(["curriculum", "prioritized", "uniform"]), st.integers(0, 10**6))
def test_sampling_deterministic(strategy, seed):
    pool = [{"difficulty": d, "success_rate": s} for d, s in [(0.1, 0.9), (0.5, 0.2), (0.9, 0.0)]]
    a = rl.sample_training_batch(pool, strategy, np.random.default_rng(seed), 16, 0.4)
    b = rl.sample_training_batch(pool, strategy, np.random.default_rng(seed), 16, 0.4)
    assert a.tolist() == b.tolist()


def test_sampling_errors(rng):
    with pytest.raises(ValueError):
        rl.sample_training_batch([], "uniform", rng, 2)
    with pytest.raises(ValueError):
        rl.sample_training_batch([{"difficulty": 0, "success_rate": 0}], "lottery", rng, 2)


def test_verifier():
    assert rl.verify("so \\boxed{12}", "12") == 1.0
    assert rl.verify("\\boxed{3} then \\boxed{12}", "12") == 1.0
    assert rl.verify("\\boxed{12 }", "12") == 0.0
    assert rl.verify("12", "12") == 0.0


def test_task_reward_table_matches_verifier():
    task = rl.TwoStepTask(n_prompts=3, n_symbols=4, seed=2)
    table = task.reward_table()
    for p in range(3):
        for a in range(4):
            for b in range(4):
                assert table[p, a, b] == task.reward(p, np.array([a, b]))


def test_policy_probs_match_seq_logp(rng):
    pol = rl.TabularPolicy(2, 3, (rng.normal(size=(2, 3)), rng.normal(size=(2, 3, 3))))
    P = pol.probs()
    assert P.sum(axis=(1, 2)) == pytest.approx([1.0, 1.0])
    lp = pol.seq_logp(np.array([1]), np.array([[2, 0]])).data[0]
    assert math.exp(lp) == pytest.approx(P[1, 2, 0], rel=1e-5)


def test_reference_frozen_then_replaced():
    task = rl.TwoStepTask(seed=1)
    md = rl.MirrorDescent(task, rl.MirrorConfig(tau=0.1, min_len=2, max_len=8), seed=1)
    before = md.policy.copy()
    md.step()
    assert md.phase == "idle" and md.iteration == 1
    np.testing.assert_array_equal(md.reference.l1.data, md.policy.l1.data)
    assert not np.array_equal(before.l2.data, md.policy.l2.data)
    md.phase = "optimizing"
    with pytest.raises(RuntimeError):
        md.step()


def test_mirror_descent_improves_quickly():
    curve = rl.run_mirror_descent(0.1, seed=0, iterations=20)
    assert curve[0] == pytest.approx(1 / 25)
    assert curve[-1] > 0.9


def test_huge_tau_stays_put():
    curve = rl.run_mirror_descent(1e6, seed=0, iterations=10)
    assert np.abs(curve - curve[0]).max() < 1e-3
