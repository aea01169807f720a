import numpy as np
import pytest

from hierkl.errors import ConfigError
from hierkl.learners import (LearnerConfig, discrete_vtrace_update, distill_update, draw_noise, kstep_targets,
                             latent_sources, make_learner_state, onpolicy_update, policy_objective, svg0_pass,
                             svg0_update, vtrace_pass)
from hierkl.objectives import RegularizerConfig
from hierkl.offpolicy import ReplaySegment, TraceConfig, collate
from hierkl.policy import ActionSpace, AsymmetryMask, ObservationBundle, build_stack

H = 1e-6


def _stack(prior="iso", sharing="shared", latent=3, discrete=False, period=1, seed=1, bound=None):
    mask = AsymmetryMask(hl=("proprio", "task"), ll=("proprio",), default_ll=("proprio",))
    asp = ActionSpace("discrete", 4) if discrete else ActionSpace("continuous", 2, bound=bound)
    return build_stack({"proprio": 2, "task": 3}, mask, asp, latent_dim=latent, prior=prior, sharing=sharing,
                       hl_hidden=(8,), ll_hidden=(8,), prior_hidden=(5,), rng=np.random.default_rng(seed),
                       out_scale=0.5, latent_period=period)


def _batch(stack, B=3, K=4, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for b in range(B):
        obs = ObservationBundle({"proprio": rng.normal(size=(K + 1, 2)), "task": rng.normal(size=(K + 1, 3))})
        a = rng.integers(0, 4, size=K) if stack.action_space.discrete else rng.normal(size=(K, 2))
        out.append(ReplaySegment(obs, a, rng.normal(size=K), rng.normal(size=K) - 1.5, K if b else K - 1,
                                 terminal=(b == 0), t0=1 + b, z_prev0=rng.normal(size=stack.latent_dim)))
    return collate(out)


def _fd(set_value, p0, f):
    num = np.zeros_like(p0.values)
    for i in range(len(num)):
        for s in (1, -1):
            v = p0.values.copy()
            v[i] += s * H
            set_value(p0.with_values(v))
            num[i] += s * f() / (2 * H)
    set_value(p0)
    return num


def _rel(num, g):
    return np.max(np.abs(num - g)) / max(1e-8, np.max(np.abs(num)))


SVG_CFG = LearnerConfig(reg=RegularizerConfig(alpha=0.3, alpha_entropy=0.1, gamma=0.9), q_samples=2)
COMBOS = [(p, s) for p in ("iso", "ar1", "ar_learned") for s in ("shared", "separate")]


@pytest.mark.parametrize("prior,sharing,bound", [c + (None,) for c in COMBOS] + [("ar1", "separate", 0.3)])
def test_svg0_gradients_match_finite_differences(prior, sharing, bound):
    st = _stack(prior, sharing, bound=bound)
    S = make_learner_state(st, SVG_CFG, critic_hidden=(6,), seed=3)
    noise_rng = np.random.default_rng(5)
    for k in S.target:
        S.target[k] = S.target[k].with_values(S.target[k].values + 0.05 * noise_rng.normal(size=len(S.target[k])))
    b = _batch(st)
    noise = draw_noise(S, b, SVG_CFG)
    grads, _, aux = svg0_pass(S, b, SVG_CFG, noise)
    z_fix, zp = aux["z"].copy(), aux["z_prev"].copy()
    for comp in ("hl", "ll"):
        num = _fd(lambda p, c=comp: st.params.__setitem__(c, p), st.params[comp],
                  lambda: policy_objective(S, b, SVG_CFG, noise, z_for_q=z_fix, z_prev_for_prior=zp))
        assert _rel(num, grads["policy"][comp]) < 1e-5, comp
    qt = aux["q_target"]

    def critic_loss():
        a2 = svg0_pass(S, b, SVG_CFG, noise)[2]
        return 0.5 * np.sum(((a2["q_online"] - qt) * b.mask) ** 2) / b.mask.sum()

    num = _fd(lambda p: setattr(S, "critic", p), S.critic, critic_loss)
    assert _rel(num, grads["critic"]["critic"]) < 1e-5
    for comp, g in grads["distill"].items():
        num = _fd(lambda p, c=comp: st.params.__setitem__(c, p), st.params[comp],
                  lambda: svg0_pass(S, b, SVG_CFG, noise)[1]["distill_loss"])
        assert _rel(num, g) < 1e-5, comp
    expected = {"iso": set(), "ar1": set(), "ar_learned": {"default_hl"}}[prior]
    if sharing == "separate":
        expected.add("default_ll")
    assert set(grads["distill"]) == expected


VT_CFG = LearnerConfig(reg=RegularizerConfig(alpha=0.3, alpha_entropy=0.1, gamma=0.9),
                       trace=TraceConfig(1.0, 1.2, 1.5))


@pytest.mark.parametrize("prior,sharing,latent", [c + (3,) for c in COMBOS] + [("iso", "shared", 0),
                                                                             ("iso", "separate", 0)])
def test_vtrace_gradients_match_finite_differences(prior, sharing, latent):
    st = _stack(prior, sharing, latent=latent, discrete=True, period=3)
    S = make_learner_state(st, VT_CFG, critic="v", critic_hidden=(6,), seed=3)
    b = _batch(st, K=5)
    eps = np.random.default_rng(9).normal(size=(3, 6, latent))
    grads, _, aux = vtrace_pass(S, b, VT_CFG, eps)
    pgw, w, zp = aux["pg_weight"], aux["w"], aux["z_prev"]

    def surrogate():
        a = vtrace_pass(S, b, VT_CFG, eps, zp)[2]
        return np.sum(pgw * a["log_pi"]) + np.sum(w * (0.1 * a["entropy"] - a["kl_p"]))

    for comp in st.trainable_agent():
        num = _fd(lambda p, c=comp: st.params.__setitem__(c, p), st.params[comp], surrogate)
        assert _rel(num, grads["policy"][comp]) < 1e-5, comp
    for comp, g in grads["distill"].items():
        num = _fd(lambda p, c=comp: st.params.__setitem__(c, p), st.params[comp],
                  lambda: vtrace_pass(S, b, VT_CFG, eps)[1]["distill_loss"])
        assert _rel(num, g) < 1e-5, comp


def test_latent_sources_hold_latents():
    gate, fresh, src = latent_sources(np.array([1, 2]), 5, 3)
    np.testing.assert_array_equal(gate, [[1, 0, 0, 1, 0], [0, 0, 1, 0, 0]])
    np.testing.assert_array_equal(src, [[0, 0, 0, 3, 3], [0, 0, 2, 2, 2]])
    assert fresh[:, 0].all()


def test_kstep_targets_by_hand():
    r = np.array([[1.0, 2.0, 3.0]])
    v = np.array([[0.0, 10.0, 20.0, 30.0]])
    kl = np.array([[0.0, 1.0, 1.0, 1.0]])
    got = kstep_targets(r, v, kl, 0.5, 0.1, np.ones((1, 3)), np.array([2]))
    # L = 2: G_0 = 1 - .05 + .5 * 2 - .25 * .1 + .25 * 20; G_1 = 2 - .05 + .5 * 20
    np.testing.assert_allclose(got[0, :2], [1 - 0.05 + 1 - 0.025 + 5, 2 - 0.05 + 10], atol=1e-14)
    assert got[0, 2] == 0


@pytest.mark.parametrize("update", ["svg0", "onpolicy", "vtrace"])
def test_frozen_components_do_not_move(update):
    discrete = update == "vtrace"
    st = _stack("ar_learned", "separate", discrete=discrete)
    cfg = VT_CFG if discrete else SVG_CFG
    S = make_learner_state(st, cfg, critic="v" if discrete else "q", critic_hidden=(6,), seed=3,
                           frozen={"ll", "default_hl"})
    before = {k: st.params[k].copy() for k in ("ll", "default_hl", "hl")}
    b = _batch(st)
    fn = {"svg0": svg0_update, "onpolicy": onpolicy_update, "vtrace": discrete_vtrace_update}[update]
    S, diag = fn(S, b, cfg)
    assert diag["grad_norm/ll"] == 0.0 and diag["grad_norm/default_hl"] == 0.0
    assert st.params["ll"] == before["ll"] and st.params["default_hl"] == before["default_hl"]
    assert st.params["hl"] != before["hl"]


def test_zero_learning_rate_leaves_params_unchanged():
    cfg = LearnerConfig(lr_policy=0.0, lr_critic=0.0, lr_default=0.0, reg=SVG_CFG.reg)
    st = _stack("ar_learned", "separate")
    S = make_learner_state(st, cfg, critic_hidden=(6,), seed=3)
    before = {k: v.copy() for k, v in S.online().items()}
    for _ in range(3):
        S, _ = svg0_update(S, _batch(st), cfg)
    assert all(S.online()[k] == before[k] for k in before)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_update_is_skipped():
    st = _stack("iso", "shared")
    S = make_learner_state(st, SVG_CFG, critic_hidden=(6,), seed=3)
    b = _batch(st)
    b.rewards[0, 0] = np.inf
    before = {k: v.copy() for k, v in S.online().items()}
    S, diag = svg0_update(S, b, SVG_CFG)
    assert diag.get("skipped") and S.skipped == 1 and S.updates == 0
    assert all(S.online()[k] == before[k] for k in before)


def test_svg0_update_syncs_targets_on_schedule():
    cfg = LearnerConfig(reg=SVG_CFG.reg, target_period=2)
    st = _stack()
    S = make_learner_state(st, cfg, critic_hidden=(6,), seed=3)
    b = _batch(st)
    synced = [svg0_update(S, b, cfg)[1]["synced"] for _ in range(6)]
    assert synced == [False, False, True, False, False, True]
    assert S.target["critic"] == S.critic


def test_distillation_reduces_kl():
    cfg = LearnerConfig(lr_default=1e-2, reg=SVG_CFG.reg)
    st = _stack("ar_learned", "separate", discrete=True)
    S = make_learner_state(st, cfg, critic="v", critic_hidden=(6,), seed=3)
    b = _batch(st, B=8)
    first = distill_update(S, b, cfg)[1]["distill_loss"]
    for _ in range(200):
        S, diag = distill_update(S, b, cfg)
    assert diag["distill_loss"] < 0.5 * first


def test_config_validation():
    with pytest.raises(ConfigError):
        LearnerConfig(lr_policy=-1.0)
    with pytest.raises(ConfigError):
        LearnerConfig(unroll=0)
    with pytest.raises(ConfigError):
        make_learner_state(_stack(discrete=True), SVG_CFG, critic="q")
    with pytest.raises(ConfigError):
        make_learner_state(_stack(), SVG_CFG, frozen={"nope"})


def test_action_bound_validation():
    with pytest.raises(ConfigError):
        ActionSpace("discrete", 4, bound=1.0)
    with pytest.raises(ConfigError):
        ActionSpace("continuous", 2, bound=0.0)


def test_bounded_actions_outside_the_box_get_no_critic_gradient():
    # with a tiny bound every sampled action is clipped; with no KL, entropy
    # or mean penalty nothing is left to move the policy
    reg = RegularizerConfig(alpha=0.0, alpha_entropy=0.0, gamma=0.9)
    cfg = LearnerConfig(reg=reg, action_penalty=0.0)
    st = _stack("iso", "shared", bound=1e-9)
    S = make_learner_state(st, cfg, critic_hidden=(6,), seed=3)
    b = _batch(st)
    grads = svg0_pass(S, b, cfg, draw_noise(S, b, cfg))[0]
    assert np.allclose(grads["policy"]["hl"], 0)
    assert np.allclose(grads["policy"]["ll"], 0)


def test_action_penalty_pulls_means_into_the_box():
    reg = RegularizerConfig(alpha=0.0, alpha_entropy=0.0, gamma=0.9)
    cfg = LearnerConfig(reg=reg, action_penalty=1.0)
    st = _stack("iso", "shared", bound=1e-9)
    S = make_learner_state(st, cfg, critic_hidden=(6,), seed=3)
    b = _batch(st)
    noise = draw_noise(S, b, cfg)
    before = policy_objective(S, b, cfg, noise)
    g = svg0_pass(S, b, cfg, noise)[0]["policy"]
    for comp in ("hl", "ll"):
        st.params[comp] = st.params[comp].with_values(st.params[comp].values + 1e-3 * g[comp])
    assert before < 0 and policy_objective(S, b, cfg, noise) > before
    with pytest.raises(ConfigError):
        LearnerConfig(action_penalty=-1.0)
