"""Acceptance checks 1-12. Each prints one PASS/FAIL line with its numbers.

Checks 6-10 train agents and are marked slow; together they take hours on a
single core. Training outputs go to a session temp directory, and the
grid-world pretraining runs are shared between checks 7, 8 and 9.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from hierkl import autodiff, distributions, offpolicy, oracles
from hierkl.harness import cli
from hierkl.harness.config import load_config
from hierkl.harness.klfield import goal_directed_fraction, kl_field
from hierkl.harness.runtime import env_spec, restore_stack, run_training
from hierkl.harness.transfer import run_transfer
from hierkl.harness.verify import MUTATIONS, run_verify
from hierkl.policy import ObservationBundle, action_head

CONFIGS = Path(__file__).resolve().parents[1] / "configs"
SEEDS = range(5)


def cfg_file(name, **overrides):
    return load_config(CONFIGS / name, {k.replace("__", "."): v for k, v in overrides.items()})


# -- 1-5: exact property suites


def test_c01_gradients(report):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        depth = int(rng.integers(1, 4))
        sizes = tuple(int(rng.integers(1, 33)) for _ in range(depth + 1))
        spec = autodiff.MLPSpec(sizes, str(rng.choice(["elu", "tanh"])))
        params = autodiff.init_params(spec, rng)
        x = rng.standard_normal((2, sizes[0]))
        w = rng.standard_normal((2, sizes[-1]))

        def loss(v, spec=spec, params=params, x=x, w=w):
            p = params.with_values(v)
            out, tape = autodiff.mlp_forward(spec, p, x, record=True)
            return float(np.sum(out * w)), autodiff.mlp_backward(spec, p, tape, w)[0]

        worst = max(worst, oracles.finite_diff_check(loss, params.values, h=1e-5))
    secs = time.perf_counter() - start
    report(1, worst < 1e-4 and secs < 60, f"max relative error {worst:.2e} over 100 MLPs in {secs:.1f}s")


def test_c02_gaussian_kl(report):
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        p = distributions.DiagGaussian(rng.normal(size=1), np.exp(rng.uniform(-1, 1, size=1)))
        q = distributions.DiagGaussian(rng.normal(size=1), np.exp(rng.uniform(-1, 1, size=1)))
        worst = max(worst, abs(float(distributions.kl_diag_gaussian(p, q)) - oracles.gaussian_kl_quadrature(p, q)))
    add = 0.0
    for _ in range(100):
        d = int(rng.integers(2, 9))
        p = distributions.DiagGaussian(rng.normal(size=d), np.exp(rng.uniform(-1, 1, size=d)))
        q = distributions.DiagGaussian(rng.normal(size=d), np.exp(rng.uniform(-1, 1, size=d)))
        parts = sum(float(distributions.kl_diag_gaussian(
            distributions.DiagGaussian(p.mean[i:i + 1], p.std[i:i + 1]),
            distributions.DiagGaussian(q.mean[i:i + 1], q.std[i:i + 1]))) for i in range(d))
        add = max(add, abs(float(distributions.kl_diag_gaussian(p, q)) - parts))
    report(2, worst < 1e-6 and add < 1e-12, f"quadrature gap {worst:.1e}; additivity gap {add:.1e}")


def test_c03_kl_bound(report):
    rng = np.random.default_rng(3)
    start = time.perf_counter()
    slack = np.inf
    for _ in range(200):
        nz, na = int(rng.integers(1, 6)), int(rng.integers(1, 6))
        exact, bound = oracles.marginal_kl_enumeration(oracles.random_latent_model(rng, nz, na),
                                                       oracles.random_latent_model(rng, nz, na))
        slack = min(slack, bound - exact)
    gap = 0.0
    for _ in range(20):
        na = int(rng.integers(1, 6))
        pz, paz = oracles.random_latent_model(rng, 1, na)
        _, qaz = oracles.random_latent_model(rng, 1, na)
        exact, bound = oracles.marginal_kl_enumeration((pz, paz), (pz, qaz))
        gap = max(gap, abs(bound - exact))
    secs = time.perf_counter() - start
    report(3, slack >= -1e-9 and gap < 1e-12 and secs < 60,
           f"min bound - exact {slack:.2e}; degenerate gap {gap:.1e}; {secs:.1f}s")


def test_c04_discount_identity(report):
    rng = np.random.default_rng(4)
    bad = 0
    for _ in range(1000):
        a = rng.normal(size=int(rng.integers(1, 101)))
        bad += not oracles.discount_identity_check(a, float(rng.uniform(0.001, 0.999)), tol=1e-10)
    report(4, bad == 0, f"{bad}/1000 sequences violate the identity at 1e-10")


def test_c05_retrace_vtrace(report):
    rng = np.random.default_rng(5)
    K, gamma, alpha = 10, 0.9, 0.3
    cfg = offpolicy.TraceConfig()
    ret = vt = tele = 0.0
    for _ in range(1000):
        q, v = rng.normal(size=K), rng.normal(size=K + 1)
        kl, r = rng.exponential(size=K + 1), rng.normal(size=K)
        lp, lm = rng.normal(size=K) - 1, rng.normal(size=K) - 1
        d = (rng.random(K) > 0.1).astype(float)
        c = offpolicy.traces(lp, lm, 1.0)
        got = offpolicy.retrace_targets(q, v, kl, r, gamma, alpha, c, d)
        ret = max(ret, np.max(np.abs(got - oracles.retrace_bruteforce(q, v, kl, r, gamma, alpha, c, d))))
        got, _ = offpolicy.vtrace_targets(v, kl, r, gamma, cfg, lp, lm, d)
        ref, _ = oracles.vtrace_bruteforce(v, kl, r, gamma, 1.0, 1.0, lp, lm, d)
        vt = max(vt, np.max(np.abs(got - ref)))
        # on-policy, lambda = 1, exact expectations: bootstrap values are the next Q
        v_on = v.copy()
        v_on[1:-1] = q[1:]
        got = offpolicy.retrace_targets(q, v_on, kl, r, gamma, alpha, offpolicy.traces(lp, lp, 1.0))
        ref = [oracles.regularized_kstep_return(r, kl, v_on[-1], gamma, alpha, t) for t in range(K)]
        tele = max(tele, np.max(np.abs(got - ref)))
    ok = max(ret, vt, tele) < 1e-10
    report(5, ok, f"retrace {ret:.1e}; v-trace {vt:.1e}; on-policy telescoping {tele:.1e}")


# -- 6: tabular agreement with soft value iteration


def _tabular_tv(state, mdp, pistar):
    x = ObservationBundle({"state": np.eye(mdp.num_states)})
    logits = action_head(state.stack, "ll", x.view(("state",)))[0].logits
    pi = np.exp(logits - logits.max(-1, keepdims=True))
    pi /= pi.sum(-1, keepdims=True)
    return float(0.5 * np.abs(pi - pistar).sum(-1).max())


@pytest.mark.slow
def test_c06_soft_vi_agreement(report, tmp_path):
    start = time.perf_counter()
    tvs, residuals, updates = [], [], []
    for m in range(20):
        cfg = cfg_file("tabular_softvi.cfg", env__mdp_seed=m, run__seed=m, run__out_dir=str(tmp_path / f"m{m}"))
        mdp = env_spec(cfg).mdp
        uniform = oracles.TabularMDP(mdp.P, mdp.r, cfg["learner.gamma"], np.full_like(mdp.pi0, 1 / mdp.num_actions))
        Q, V, pistar = oracles.soft_value_iteration(uniform, cfg["learner.alpha"])
        residuals.append(oracles.soft_vi_residual(uniform, cfg["learner.alpha"], Q, V))
        res = run_training(cfg)
        updates.append(res.state.updates)
        tvs.append(_tabular_tv(res.state, mdp, pistar))
    secs = time.perf_counter() - start
    hits = sum(tv <= 0.05 for tv in tvs)
    ok = max(residuals) < 1e-8 and hits >= 18 and max(updates) <= 100_000 and secs < 600
    report(6, ok, f"{hits}/20 MDPs within TV 0.05 (max TV {max(tvs):.3f}); soft-VI residual {max(residuals):.1e}; "
                  f"{max(updates)} updates each; {secs:.0f}s")


# -- 7-9: grid world pretraining, body transfer and the KL-reward field


@pytest.fixture(scope="session")
def grid_pretrained(tmp_path_factory):
    """Criterion-7 runs: one per seed, stopped at the first eval >= 0.9."""
    root = tmp_path_factory.mktemp("grid_1step")
    runs = []
    for seed in SEEDS:
        cfg = cfg_file("grid_1step.cfg", run__seed=seed, run__out_dir=str(root / f"s{seed}"), run__stop_success=0.9)
        start = time.perf_counter()
        res = run_training(cfg)
        runs.append((res, time.perf_counter() - start))
    return runs


@pytest.mark.slow
def test_c07_grid_learning(report, grid_pretrained):
    parts, hits = [], 0
    for res, secs in grid_pretrained:
        good = [e for e in res.evals if e["success"] >= 0.9 and e["learner_frames"] <= 2_000_000]
        hit = bool(good) and secs < 1800
        hits += hit
        first = f"{good[0]['learner_frames']}" if good else "never"
        parts.append(f"{first} frames/{secs:.0f}s")
    report(7, hits >= 4, f"{hits}/5 seeds reach 0.9 within 2e6 frames (first hit: {', '.join(parts)})")


@pytest.mark.slow
def test_c08_body_transfer(report, grid_pretrained, tmp_path):
    gaps = []
    for seed, (src, _) in zip(SEEDS, grid_pretrained):
        body = run_transfer(cfg_file("grid_8step_body.cfg", run__seed=seed, run__out_dir=str(tmp_path / f"b{seed}"),
                                     transfer__checkpoint=str(src.checkpoint)))
        scratch = run_training(cfg_file("grid_8step_scratch.cfg", run__seed=seed,
                                        run__out_dir=str(tmp_path / f"s{seed}")))
        assert body.learner_frames == pytest.approx(scratch.learner_frames, rel=0.01)
        gaps.append(body.final_eval["success"] - scratch.final_eval["success"])
    wins = sum(g >= 0.3 for g in gaps)
    report(8, wins >= 4, f"{wins}/5 seeds with transfer - scratch >= 0.3 (gaps {np.round(gaps, 2).tolist()})")


@pytest.mark.slow
def test_c09_kl_field(report, grid_pretrained):
    means, centre = [], []
    for res, _ in grid_pretrained:
        stack, cfg = restore_stack(res.checkpoint)
        grid = env_spec(cfg).grid
        fr = {(x, y): goal_directed_fraction(kl_field(stack, grid, (x, y)), grid, (x, y))
              for x in range(grid.size) for y in range(grid.size)}
        means.append(float(np.mean(list(fr.values()))))
        centre.append(fr[(4, 4)])
    ok = min(means) >= 0.8
    report(9, ok, f"goal-directed fraction averaged over goals per seed {np.round(means, 3).tolist()} "
                  f"(goal (4,4): {np.round(centre, 3).tolist()})")


# -- 10: point-mass hierarchy vs flat


def _steps_to(evals, level):
    return next((e["learner_steps"] for e in evals if e["success"] >= level), np.inf)


@pytest.mark.slow
def test_c10_pointmass(report, tmp_path):
    out = {}
    for name in ("hier", "flat"):
        steps, final = [], []
        for seed in SEEDS:
            res = run_training(cfg_file(f"pointmass_{name}.cfg", run__seed=seed,
                                        run__out_dir=str(tmp_path / f"{name}{seed}")))
            steps.append(_steps_to(res.evals, 0.5))
            final.append(res.final_eval["success"])
        out[name] = (float(np.median(steps)), float(np.mean(final)), steps, final)
    (h_med, h_fin, h_steps, h_all), (f_med, f_fin, f_steps, f_all) = out["hier"], out["flat"]
    ok = h_med < f_med and h_fin > 0.8 and f_fin > 0.8
    report(10, ok, f"median steps to 0.5: hier {h_med} vs flat {f_med}; mean final success hier {h_fin:.2f} "
                   f"{np.round(h_all, 2).tolist()} flat {f_fin:.2f} {np.round(f_all, 2).tolist()}; "
                   f"steps hier {h_steps} flat {f_steps}")


# -- 11-12: determinism and mutation sentinels


def test_c11_determinism(report, tmp_path, capsys):
    outs = []
    for run in ("a", "b"):
        out = tmp_path / run
        code = cli.main(["train", str(CONFIGS / "grid_1step.cfg"), "--seed", "7", "--out-dir", str(out),
                         "--frames", "20000", "--set", "run.num_actors=1", "--set", "run.eval_every=10000",
                         "--set", "run.metrics_every=2"])
        assert code == 0
        outs.append((out / "metrics.csv").read_bytes())
    capsys.readouterr()
    same = outs[0] == outs[1]
    report(11, same and len(outs[0]) > 0, f"metrics.csv identical across two runs ({len(outs[0])} bytes)")


def test_c12_mutation_sentinels(report):
    clean = [r.name for r in run_verify() if not r.passed]
    caught = {}
    for name in sorted(MUTATIONS):
        caught[name] = [r.name for r in run_verify(name) if not r.passed]
    ok = not clean and all(caught.values())
    detail = "; ".join(f"{m}: {', '.join(f) or 'NOT CAUGHT'}" for m, f in caught.items())
    report(12, ok, f"clean run failures {clean or 'none'}; {detail}")
