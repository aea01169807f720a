"""Release gate: oracle checks over the core math, with optional injected bugs.

Each check is a named function returning ``(passed, detail)``. Mutations
patch module attributes for the duration of a run so that the checks can be
shown to catch them.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .. import autodiff, distributions, kernels, objectives, offpolicy, oracles
from ..errors import HierKLError


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def check_gradients(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        depth = int(rng.integers(1, 4))
        sizes = [int(rng.integers(1, 9)) for _ in range(depth + 1)]
        act = str(rng.choice(["elu", "tanh"]))
        spec = autodiff.MLPSpec(tuple(sizes), act)
        params = autodiff.init_params(spec, rng)
        x = rng.standard_normal((3, sizes[0]))
        w = rng.standard_normal((3, sizes[-1]))

        def loss(v):
            p = params.with_values(v)
            out, tape = autodiff.mlp_forward(spec, p, x, record=True)
            g, _ = autodiff.mlp_backward(spec, p, tape, w)
            return float(np.sum(out * w)), g

        worst = max(worst, oracles.finite_diff_check(loss, params.values))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_gaussian_kl(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(20):
        p = distributions.DiagGaussian(rng.normal(size=1), np.exp(rng.uniform(-1, 1, size=1)))
        q = distributions.DiagGaussian(rng.normal(size=1), np.exp(rng.uniform(-1, 1, size=1)))
        closed = float(distributions.kl_diag_gaussian(p, q))
        worst = max(worst, abs(closed - oracles.gaussian_kl_quadrature(p, q)))
    return worst < 1e-6, f"max |closed form - quadrature| {worst:.2e}"


def check_kl_bound(rng) -> tuple[bool, str]:
    slack = np.inf
    try:
        for _ in range(200):
            nz, na = int(rng.integers(1, 6)), int(rng.integers(1, 6))
            exact, bound = oracles.marginal_kl_enumeration(oracles.random_latent_model(rng, nz, na),
                                                           oracles.random_latent_model(rng, nz, na))
            slack = min(slack, bound - exact)
        pz, paz = oracles.random_latent_model(rng, 1, 4)
        _, qaz = oracles.random_latent_model(rng, 1, 4)
        exact, bound = oracles.marginal_kl_enumeration((pz, paz), (pz, qaz))
    except HierKLError as exc:
        return False, f"{type(exc).__name__}: {exc}"
    tight = abs(bound - exact) < 1e-12
    return slack >= -1e-9 and tight, f"min slack {slack:.2e}; degenerate gap {abs(bound - exact):.1e}"


def check_discount_identity(rng) -> tuple[bool, str]:
    bad = 0
    for _ in range(200):
        a = rng.normal(size=int(rng.integers(1, 101)))
        bad += not oracles.discount_identity_check(a, float(rng.uniform(0.01, 0.99)))
    return bad == 0, f"{bad} failing sequences"


def _segment(rng, K=10):
    q = rng.normal(size=K)
    v = rng.normal(size=K + 1)
    kl = rng.exponential(size=K + 1)
    r = rng.normal(size=K)
    log_pi, log_mu = rng.normal(size=K) - 1, rng.normal(size=K) - 1
    d = (rng.random(K) > 0.1).astype(float)
    return q, v, kl, r, log_pi, log_mu, d


def check_retrace(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(100):
        q, v, kl, r, lp, lm, d = _segment(rng)
        c = offpolicy.traces(lp, lm, 1.0)
        got = offpolicy.retrace_targets(q, v, kl, r, 0.9, 0.3, c, d)
        worst = max(worst, np.max(np.abs(got - oracles.retrace_bruteforce(q, v, kl, r, 0.9, 0.3, c, d))))
    return worst < 1e-10, f"max deviation {worst:.1e}"


def check_vtrace(rng) -> tuple[bool, str]:
    worst = 0.0
    cfg = offpolicy.TraceConfig()
    for _ in range(100):
        _, v, kl, r, lp, lm, d = _segment(rng)
        got, _ = offpolicy.vtrace_targets(v, kl, r, 0.9, cfg, lp, lm, d)
        ref, _ = oracles.vtrace_bruteforce(v, kl, r, 0.9, 1.0, 1.0, lp, lm, d)
        worst = max(worst, np.max(np.abs(got - ref)))
    return worst < 1e-10, f"max deviation {worst:.1e}"


def check_retrace_telescoping(rng) -> tuple[bool, str]:
    worst = 0.0
    for _ in range(100):
        q, v, kl, r, lp, _, _ = _segment(rng)
        # on-policy with exact expectations: the bootstrap value is the next Q
        v[1:-1] = q[1:]
        c = offpolicy.traces(lp, lp, 1.0)
        got = offpolicy.retrace_targets(q, v, kl, r, 0.9, 0.3, c)
        ref = [oracles.regularized_kstep_return(r, kl, v[-1], 0.9, 0.3, t) for t in range(len(r))]
        worst = max(worst, np.max(np.abs(got - ref)))
    return worst < 1e-10, f"max deviation {worst:.1e}"


def check_trace_truncation(rng) -> tuple[bool, str]:
    lp = rng.normal(scale=2.0, size=1000)
    lm = rng.normal(scale=2.0, size=1000)
    lam = 0.95
    c = offpolicy.traces(lp, lm, lam)
    expected = lam * np.minimum(1.0, np.exp(lp - lm))
    over = int(np.sum(c > lam + 1e-15))
    ok = over == 0 and np.allclose(c, expected, rtol=0, atol=1e-14)
    return ok, f"{over} traces above lambda; max |c - lam min(1, ratio)| {np.max(np.abs(c - expected)):.1e}"


def check_target_sync(rng) -> tuple[bool, str]:
    period = 3
    sync = offpolicy.TargetSync(period)
    spec = autodiff.MLPSpec((2, 2))
    online = {"net": autodiff.init_params(spec, rng)}
    target = {"net": online["net"].copy()}
    synced_at = []
    for step in range(1, 13):
        online["net"] = online["net"].with_values(online["net"].values + 1.0)
        before = target["net"].copy()
        if sync.tick(online, target):
            synced_at.append(step)
            if target["net"] != online["net"]:
                return False, f"target differs from online right after sync at update {step}"
        elif target["net"] != before:
            return False, f"target changed without a sync at update {step}"
    expected = [4, 8, 12]
    return synced_at == expected, f"syncs at {synced_at}, expected {expected}"


def check_soft_vi(rng) -> tuple[bool, str]:
    P = np.ones((1, 2, 1))
    mdp = oracles.TabularMDP(P, np.array([[1.0, 0.0]]), 0.0, np.full((1, 2), 0.5))
    Q, V, pi = oracles.soft_value_iteration(mdp, 1.0)
    e = np.e
    closed = (abs(V[0] - np.log((e + 1) / 2)) < 1e-12 and abs(pi[0, 0] - e / (e + 1)) < 1e-12)
    worst = 0.0
    for _ in range(5):
        m = oracles.random_mdp(rng, 5, 3, gamma=0.9)
        Q, V, pi = oracles.soft_value_iteration(m, 0.5)
        worst = max(worst, oracles.soft_vi_residual(m, 0.5, Q, V))
    return closed and worst < 1e-8, f"closed form {'ok' if closed else 'wrong'}; max residual {worst:.1e}"


def check_kernel_backends(rng) -> tuple[bool, str]:
    if len(kernels.BACKENDS) < 2:
        return True, "only the python backend is available"
    deltas = rng.normal(size=(4, 10))
    coef = rng.random((4, 10))
    outs = [kernels.BACKENDS[b].backward_accumulate(deltas, coef) for b in kernels.BACKENDS]
    dev = max(float(np.max(np.abs(o - outs[0]))) for o in outs)
    return dev < 1e-12, f"max backend deviation {dev:.1e}"


def check_regularized_return(rng) -> tuple[bool, str]:
    cfg = objectives.RegularizerConfig(alpha=0.5, gamma=0.9, latent_period=2)
    r, hl, ll = rng.normal(size=6), rng.exponential(size=6), rng.exponential(size=6)
    got = objectives.regularized_return(objectives.TrajectoryTerms(r, hl, ll), cfg)
    t = np.arange(1, 7)
    gate = ((t - 1) % 2 == 0).astype(float)
    ref = float(np.sum(0.9 ** t * (r - 0.5 * gate * hl - 0.5 * ll)))
    return abs(got - ref) < 1e-12, f"deviation {abs(got - ref):.1e}"


CHECKS: dict[str, Callable] = {
    "gradient_finite_difference": check_gradients,
    "gaussian_kl_quadrature": check_gaussian_kl,
    "kl_decomposition_bound": check_kl_bound,
    "discount_identity": check_discount_identity,
    "retrace_bruteforce": check_retrace,
    "vtrace_bruteforce": check_vtrace,
    "retrace_onpolicy_telescoping": check_retrace_telescoping,
    "trace_truncation": check_trace_truncation,
    "target_sync_period": check_target_sync,
    "soft_value_iteration": check_soft_vi,
    "regularized_return": check_regularized_return,
    "kernel_backends_agree": check_kernel_backends,
}


# ---------------------------------------------------------------------------
# injected bugs


def _flip_kl():
    kl_cat, kl_gauss = distributions.kl_categorical, distributions.kl_diag_gaussian
    return [(distributions, "kl_categorical", lambda p, q: -kl_cat(p, q)),
            (distributions, "kl_diag_gaussian", lambda p, q: -kl_gauss(p, q))]


def _untruncated_traces():
    def traces(log_pi, log_mu, lam):
        return lam * np.exp(np.asarray(log_pi, dtype=np.float64) - np.asarray(log_mu, dtype=np.float64))
    return [(offpolicy, "traces", traces)]


def _broken_sync():
    def tick(self, online, target):
        self.counter += 1
        if self.counter >= self.period:  # off by one
            for name, p in online.items():
                target[name] = p.copy()
            self.counter = 0
            self.syncs += 1
            return True
        return False
    return [(offpolicy.TargetSync, "tick", tick)]


MUTATIONS: dict[str, Callable] = {
    "kl_sign": _flip_kl,
    "trace_truncation": _untruncated_traces,
    "target_sync": _broken_sync,
}


@contextlib.contextmanager
def mutation(name: str | None):
    if name is None:
        yield
        return
    if name not in MUTATIONS:
        raise KeyError(f"unknown mutation {name!r}; choose from {sorted(MUTATIONS)}")
    patches = MUTATIONS[name]()
    saved = [(obj, attr, getattr(obj, attr)) for obj, attr, _ in patches]
    try:
        for obj, attr, new in patches:
            setattr(obj, attr, new)
        yield
    finally:
        for obj, attr, old in saved:
            setattr(obj, attr, old)


def run_verify(mutate: str | None = None, seed: int = 0) -> list[CheckResult]:
    results = []
    with mutation(mutate):
        for i, (name, fn) in enumerate(CHECKS.items()):
            rng = np.random.default_rng([seed, i])
            try:
                ok, detail = fn(rng)
            except Exception as exc:  # a crash is a failed check
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            results.append(CheckResult(name, bool(ok), detail))
    return results


def format_report(results: list[CheckResult]) -> str:
    lines = [f"{'PASS' if r.passed else 'FAIL'} {r.name}: {r.detail}" for r in results]
    n_fail = sum(not r.passed for r in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
