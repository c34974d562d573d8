"""Acceptance checks 1-10, one printed PASS/FAIL line each.

Run with ``pytest tests/test_acceptance.py -s`` or ``python tests/test_acceptance.py``.
Criteria 4, 5, 6 and 8 are full-size runs and take several minutes.
"""

from __future__ import annotations

import math
import sys
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from fedmac import cli
from fedmac.datagen import SyntheticConfig, gen_synthetic
from fedmac.fedcore import (
    HyperParams,
    Strategy,
    aggregate,
    client_update,
    make_clients,
    run_experiment,
    stream,
    theta_grad,
    theta_objective,
)
from fedmac.metrics import best_summary
from fedmac.models import ModelSpec, ParamVector, init_params, loss_grad_array
from fedmac.sparsity import SmoothL1Config, phi_rho, round_comm_bits
from fedmac.theorylab import (
    DEFAULT_ZETA_GRID,
    PriorConfig,
    PriorKind,
    SideModel,
    best_zeta_threshold,
    eta_sq_min,
    gen_instance,
    gen_signal,
    lemma_bound,
    lemma_precondition,
    solve_prior,
    v_zeta1,
    v_zeta2,
)

F1, F2 = PriorKind.F1_MAXCORR, PriorKind.F2_L2DIST


def _rel(a, b):
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def _central_diff(f, x, h=1e-6):
    out = np.empty_like(x)
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        out[k] = (f(x + e) - f(x - e)) / (2 * h)
    return out


def criterion_1():
    """Analytic vs central-difference gradients, loss and full personalized objective."""
    t0 = time.perf_counter()
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(1000 + i)
        spec = ModelSpec("MLR", 5, 3) if i % 2 == 0 else ModelSpec("MLP2", 5, 3, hidden_dim=4)
        theta = 0.5 * rng.standard_normal(spec.param_count)
        w = 0.5 * rng.standard_normal(spec.param_count)
        x = rng.standard_normal((6, 5))
        y = rng.integers(0, 3, 6)
        hp = HyperParams(T=1, R=1, S=1, lam=rng.uniform(0, 1), gamma=rng.uniform(0, 0.1))
        g_loss = loss_grad_array(spec, theta, x, y)[1]
        fd_loss = _central_diff(lambda v: loss_grad_array(spec, v, x, y)[0], theta)
        g_h = theta_grad(spec, theta, w, x, y, hp)
        fd_h = _central_diff(lambda v: theta_objective(spec, v, w, x, y, hp), theta)
        worst = max(worst, _rel(g_loss, fd_loss), _rel(g_h, fd_h))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-5 and elapsed < 60
    return ok, f"max relative error {worst:.2e} over 100 instances (< 1e-5), {elapsed:.1f}s"


def criterion_2():
    rng = np.random.default_rng(2)
    bad = 0
    for i in range(1000):
        rho = (1e-2, 1e-4)[i % 2]
        d = int(rng.integers(1, 200))
        x = rng.standard_normal(d) * 10.0 ** rng.uniform(-6, 1)
        l1 = math.fsum(np.abs(x))
        lo = l1 - rho * (d * math.log(2))
        phi = phi_rho(x, SmoothL1Config(rho))
        if not (lo <= phi <= l1):
            bad += 1
    return bad == 0, f"{bad} bracket violations in 1000 vectors, rho in {{1e-2, 1e-4}}"


def criterion_3():
    data = gen_synthetic(SyntheticConfig(10, 0.5, 0.5, samples_per_client=(50, 100), seed=0))
    spec = ModelSpec("MLR", 60, 10)
    hp = HyperParams(T=5, R=5, S=4)
    h_avg = run_experiment(data, spec, hp, Strategy("FedAvg"), seed=3)
    h_prox = run_experiment(data, spec, hp, Strategy("FedProx", mu=0.0), seed=3)
    w = init_params(spec, stream(3, 0))
    up_avg = client_update(make_clients(data, 3)[0], w, hp, Strategy("FedAvg"))
    up_prox = client_update(make_clients(data, 3)[0], w, hp, Strategy("FedProx", mu=0.0))
    prox_ok = h_avg == h_prox and np.array_equal(up_avg.values, up_prox.values)

    v = ParamVector(np.random.default_rng(3).standard_normal(spec.param_count), spec)
    agg = aggregate(w, [v.copy() for _ in range(7)], HyperParams(T=1, R=1, S=7, beta=1.0))
    agg_ok = np.array_equal(agg.values, v.values)

    inst = gen_instance(128, 50, 6, SideModel("noisy", sigma_w=0.2), seed=3)
    a = solve_prior(inst, PriorConfig(F1, zeta=0.0), iters=2000)
    b = solve_prior(inst, PriorConfig(F2, zeta=0.0), iters=2000)
    solve_ok = np.array_equal(a.theta_hat, b.theta_hat) and a.objective == b.objective
    detail = f"FedProx(0)==FedAvg {prox_ok}; beta=1 identical uploads {agg_ok}; f1(0)==f2(0) {solve_ok}"
    return prox_ok and agg_ok and solve_ok, detail


def criterion_4():
    t0 = time.perf_counter()
    spec = ModelSpec("MLR", 60, 10)
    wins, parts = 0, []
    for seed in (0, 1, 2):
        data = gen_synthetic(SyntheticConfig(100, 0.5, 0.5, seed=seed))
        base = dict(T=400, R=20, S=20, batch_size=20, eta_p=0.05)
        fedmac = best_summary(run_experiment(data, spec, HyperParams(lam=1e-4, eta=3000.0, **base),
                                             Strategy("FedMac"), seed)).best_pm
        fedavg = best_summary(run_experiment(data, spec, HyperParams(**base), Strategy("FedAvg"), seed)).best_gm
        pfedme = best_summary(run_experiment(data, spec, HyperParams(eta=0.02, **base),
                                             Strategy("pFedMe", lam=15.0), seed)).best_pm
        won = fedmac - fedavg >= 0.03 and fedmac - pfedme >= 0.002
        wins += won
        parts.append(f"seed {seed}: FedMac PM {100 * fedmac:.2f} / FedAvg GM {100 * fedavg:.2f} / "
                     f"pFedMe PM {100 * pfedme:.2f} {'ok' if won else 'miss'}")
    elapsed = time.perf_counter() - t0
    return wins >= 2, f"{wins}/3 seeds; " + "; ".join(parts) + f"; {elapsed / 60:.1f} min"


def criterion_5():
    # MNIST is not available offline, so this is the accepted Synthetic + MLP variant
    t0 = time.perf_counter()
    spec = ModelSpec("MLP2", 60, 10, hidden_dim=100)
    wins, parts = 0, []
    for seed in (0, 1, 2):
        data = gen_synthetic(SyntheticConfig(20, 0.5, 0.5, seed=seed))
        base = dict(T=200, R=20, S=10, batch_size=20, eta_p=0.05, gamma=3e-4)
        hm = run_experiment(data, spec, HyperParams(lam=1e-4, eta=3000.0, gamma_w=1e-8, **base),
                            Strategy("FedMac"), seed)
        hp_ = run_experiment(data, spec, HyperParams(eta=0.02, **base), Strategy("pFedMe", lam=15.0), seed)
        sp_m, sp_p = hm[-1].gm_sparsity, hp_[-1].gm_sparsity
        pm_m, pm_p = best_summary(hm).best_pm, best_summary(hp_).best_pm
        won = sp_m <= sp_p - 0.10 and pm_m >= pm_p - 0.005
        wins += won
        parts.append(f"seed {seed}: sparsity {sp_m:.3f} vs {sp_p:.3f}, PM {100 * pm_m:.2f} vs {100 * pm_p:.2f} "
                     f"{'ok' if won else 'miss'}")
    elapsed = time.perf_counter() - t0
    return wins >= 2, f"{wins}/3 seeds (Synthetic+MLP fallback); " + "; ".join(parts) + f"; {elapsed / 60:.1f} min"


def criterion_6():
    t0 = time.perf_counter()
    grid = list(range(4, 101, 4))
    res = {k: best_zeta_threshold(256, 8, SideModel("exact"), k, DEFAULT_ZETA_GRID, grid, trials=50,
                                  success_tol=1e-2, seed=0) for k in (F1, F2)}
    elapsed = time.perf_counter() - t0
    t1, t2 = res[F1].threshold, res[F2].threshold
    ok = t1 is not None and (t2 is None or t1 < t2) and elapsed < 600
    return ok, (f"N_D threshold f1 {t1} (zeta {res[F1].zeta:g}) vs f2 {t2} (zeta {res[F2].zeta:g}), "
                f"{elapsed:.0f}s")


def criterion_7():
    bad = []
    for seed in range(100):
        side = (SideModel("noisy", sigma_w=0.5), SideModel("shifted_support", k=2), SideModel())[seed % 3]
        th, w = gen_signal(128, 8, side, seed)
        if not (v_zeta1(th, w, 0.0) == 8 and v_zeta2(th, w, 0.0) == 8):
            bad.append(f"zeta=0 at seed {seed}")
        th, _ = gen_signal(128, 8, SideModel(), seed)
        if any(v_zeta2(th, th, z) != 8 for z in DEFAULT_ZETA_GRID):
            bad.append(f"v_zeta2 exact at seed {seed}")
        mags = np.abs(th[th != 0])
        if mags.min() >= 0.5 and mags.max() <= 1.5:
            z_hat = min(DEFAULT_ZETA_GRID, key=lambda z: v_zeta1(th, th, z))
            if not v_zeta1(th, th, z_hat) < 8:
                bad.append(f"v_zeta1 at seed {seed}")
    return not bad, "all identities hold on 100 instances" if not bad else "; ".join(bad[:5])


def criterion_8():
    t0 = time.perf_counter()
    gammas = np.linspace(0.05, 3.0, 60)
    sides = [SideModel("exact"), SideModel("shifted_support", k=1), SideModel("shifted_support", k=2),
             SideModel("noisy", sigma_w=0.3)]
    checked = violations = 0
    for side in sides:
        for seed in range(5):
            th, w = gen_signal(256, 8, side, seed)
            for kind in (F1, F2):
                for zeta in (0.0, 0.5, 1.0):
                    if not lemma_precondition(th, w, zeta):
                        continue
                    prior = PriorConfig(kind, zeta=zeta)
                    est, _, _ = eta_sq_min(th, w, prior, gammas, 2000, seed)
                    checked += 1
                    violations += est > lemma_bound(th, w, prior)
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and checked > 0 and elapsed < 300
    return ok, (f"{violations} violations in {checked} (instance, prior, zeta) checks over 20 instances "
                f"meeting the precondition, {elapsed:.0f}s")


def criterion_9():
    bits = round_comm_bits(79510, 0.5)
    return bits == 5_247_660, f"round_comm_bits(79510, 0.5) = {bits:,}"


FED_CFG = """\
[run]
seeds = [1, 2]
[dataset]
source = synthetic
n_clients = 8
alpha_bar = 0.5
beta_bar = 0.5
samples_min = 20
samples_max = 60
[model]
kind = MLP2
input_dim = 60
hidden_dim = 10
num_classes = 10
[train]
T = 4
R = 3
S = 4
gamma = 0.0003
[strategy.FedMac]
gamma_w = 1e-8
[strategy.pFedMe]
lam = 15
eta = 0.02
[strategy.PerFedAvg]
[strategy.FedProx]
mu = 0.01
[strategy.FedAvg]
"""

THEORY_CFG = """\
[run]
seeds = [0, 1]
[theory]
N_I = 64
s = 4
side_model = noisy
sigma_w = 0.2
zeta_grid = [0.0, 0.5, 1.0]
N_D_grid = [8, 16, 24, 32]
trials = 10
mode = optimal
mc_samples = 200
"""


def criterion_10():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        outputs = []
        for cmd, text in (("fed", FED_CFG), ("theory", THEORY_CFG)):
            cfg = tmp / f"{cmd}.ini"
            cfg.write_text(text)
            runs = []
            for rep in range(2):
                out = tmp / f"{cmd}_{rep}"
                code = cli.main([cmd, "--config", str(cfg), "--out-dir", str(out)])
                runs.append((code, {p.name: p.read_bytes() for p in sorted(out.glob("*.csv"))}))
            same = runs[0][0] == runs[1][0] == 0 and runs[0][1] == runs[1][1] and runs[0][1]
            outputs.append((cmd, bool(same), len(runs[0][1])))
    ok = all(s for _, s, _ in outputs)
    return ok, "; ".join(f"{cmd}: {n} CSVs byte-identical {s}" for cmd, s, n in outputs)


CRITERIA = {
    1: ("gradient correctness", criterion_1),
    2: ("phi_rho bracketing", criterion_2),
    3: ("reduction identities", criterion_3),
    4: ("synthetic ordering", criterion_4),
    5: ("sparse advantage", criterion_5),
    6: ("theory phase transition", criterion_6),
    7: ("v_zeta identities", criterion_7),
    8: ("Monte-Carlo vs lemma bound", criterion_8),
    9: ("communication arithmetic", criterion_9),
    10: ("determinism", criterion_10),
}


def _line(n, ok, detail):
    return f"[{'PASS' if ok else 'FAIL'}] criterion {n:2d} {CRITERIA[n][0]}: {detail}"


def _check(n, capsys):
    ok, detail = CRITERIA[n][1]()
    with capsys.disabled():
        print("\n" + _line(n, ok, detail), flush=True)
    assert ok, detail


@pytest.mark.parametrize("n", [1, 2, 3, 7, 9, 10])
def test_criterion(n, capsys):
    _check(n, capsys)


@pytest.mark.slow
@pytest.mark.parametrize("n", [4, 5, 6, 8])
def test_criterion_full_size(n, capsys):
    _check(n, capsys)


if __name__ == "__main__":
    wanted = [int(a) for a in sys.argv[1:]] or list(CRITERIA)
    failed = 0
    for n in wanted:
        ok, detail = CRITERIA[n][1]()
        failed += not ok
        print(_line(n, ok, detail), flush=True)
    sys.exit(1 if failed else 0)
