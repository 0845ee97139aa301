"""Acceptance criteria, each at its stated tolerance.

Criteria 6 to 10 train networks at desk scale and take tens of minutes on one
core. Criterion 11 runs at full scale and only when COMET_FULL_SCALE=1.
"""

import os
import time

import numpy as np
import pytest

from comet import autodiff as ad
from comet.dynamics import comet_dynamics, comet_loss, ortho_project
from comet.models import ModelConfig, init_params
from comet.physics import BENCHMARKS, generate_dataset, get_system

from conftest import fd_grad, rel_err
from test_dynamics import gram_schmidt


def _comet_nc(system):
    return min(system.true_n_c, system.n_s - 1)


def test_c1_orthogonality(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst, count = 0.0, 0
    per_system = 10_000 // len(BENCHMARKS) + 1
    for name in BENCHMARKS:
        system = get_system(name)
        n_c = _comet_nc(system)
        for k in range(per_system // 50 + 1):
            cfg = ModelConfig("comet", system.n_s, n_c, 0, 2, 32, seed=int(rng.integers(2 ** 31)))
            store = init_params(cfg)
            store = store.with_flat(store.flat * rng.uniform(0.5, 3.0))
            s = np.stack([system.init_sampler(rng) for _ in range(50)])
            s = s + rng.normal(0, 0.1, size=s.shape)
            out = comet_dynamics(store, s)
            g, sd = out.grad_c.data, out.s_dot.data
            dots = np.abs(np.einsum("bij,bj->bi", g, sd))
            bound = 1e-9 * (np.linalg.norm(g, axis=-1) * np.linalg.norm(sd, axis=-1)[:, None] + 1)
            worst = max(worst, float(np.max(dots / bound)))
            count += len(s)
    elapsed = time.perf_counter() - t0
    criterion(1, count >= 10_000 and worst <= 1.0 and elapsed < 60,
              f"{count} pairs, max |<grad c_i, s_dot>| / bound = {worst:.3g}, {elapsed:.1f}s")


def test_c2_qr_backward_oracle(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(1, 9))
        m = int(rng.integers(1, min(n, 7) + 1))
        a = rng.normal(size=(n, m))
        gq, gr = rng.normal(size=(n, m)), np.triu(rng.normal(size=(m, m)))
        q, r = ad.householder_qr(a)
        analytic = ad.qr_backward(q, r, gq, gr).data

        def f(v):
            qv, rv = ad.householder_qr(v)
            return np.sum(qv * gq) + np.sum(rv * gr)

        worst = max(worst, rel_err(analytic, fd_grad(f, a, 1e-6)))
    elapsed = time.perf_counter() - t0
    criterion(2, worst < 1e-6 and elapsed < 60,
              f"200 matrices up to 8x7, max relative error {worst:.2e}, {elapsed:.1f}s")


def test_c3_full_loss_gradient(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    errs = {}
    for name in BENCHMARKS:
        system = get_system(name)
        cfg = ModelConfig("comet", system.n_s, _comet_nc(system), 0, 2, 16, seed=3)
        store = init_params(cfg)
        s = np.stack([system.init_sampler(rng) for _ in range(8)])
        sd = system.dynamics(s) + rng.normal(0, 0.05, size=s.shape)

        def loss(flat):
            lb = comet_loss(store.with_flat(flat).tensors(), s, sd,
                            rng=np.random.default_rng(30), config=cfg)
            return float(lb.total.data)

        weights = store.tensors(requires_grad=True)
        lb = comet_loss(weights, s, sd, rng=np.random.default_rng(30), config=cfg)
        g = np.concatenate([v.data.ravel() for v in ad.grad(lb.total, weights, create_graph=False)])
        errs[name] = rel_err(g, fd_grad(loss, store.flat, 1e-6))
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    criterion(3, worst < 1e-4 and elapsed < 300,
              f"max relative error {worst:.2e} over six systems, {elapsed:.1f}s")


def test_c4_projection_oracle(criterion):
    rng = np.random.default_rng(4)
    worst, done = 0.0, 0
    while done < 1000:
        n_s = int(rng.integers(2, 9))
        n_c = int(rng.integers(1, n_s))
        g, v = rng.normal(size=(n_c, n_s)), rng.normal(size=n_s)
        if np.linalg.cond(g) > 1e3:
            continue
        worst = max(worst, float(np.max(np.abs(ortho_project(v, g).data - gram_schmidt(v, g)))))
        done += 1
    criterion(4, worst < 1e-8, f"1000 instances, max deviation from Gram-Schmidt {worst:.2e}")


def test_c5_generator_conservation(criterion):
    worst, decreasing = {}, True
    for name in BENCHMARKS:
        system = get_system(name)
        ds = generate_dataset(name, n_traj=10, n_points=100, seed=5)
        w = 0.0
        for tr in ds.trajectories:
            c = system.constants(tr.s)
            w = max(w, float(np.max(np.abs(c - c[0]) / np.maximum(np.abs(c[0]), 1.0))))
            if name == "damped-pendulum":
                decreasing &= bool(np.all(np.diff(system.quantities(tr.s)[:, 0]) < 0))
        worst[name] = w
    top = max(worst.values())
    criterion(5, top < 1e-6 and decreasing,
              f"max relative drift {top:.2e}; damped energy strictly decreasing: {decreasing}")


# ---------------------------------------------------------------- desk-scale training

DESK = dict(n_traj=30, hidden_layers=2, hidden_width=64, epochs=300, n_sims=20, t_end=50.0,
            n_points=500)
SEEDS = (0, 1, 2)


class Trainer:
    """Trains and memoises desk-scale models; optionally persists checkpoints.

    Set COMET_ACCEPTANCE_CACHE to a directory to reuse checkpoints across
    sessions (training is deterministic, so results are unchanged).
    """

    def __init__(self, cache_dir):
        self.cache_dir = cache_dir
        self.models = {}
        self.datasets = {}

    def dataset(self, name, seed, noise=0.05):
        key = (name, seed, noise)
        if key not in self.datasets:
            self.datasets[key] = generate_dataset(name, n_traj=DESK["n_traj"], noise=noise,
                                                  seed=seed)
        return self.datasets[key]

    def model(self, name, kind, n_c, seed):
        from comet.models import ParamStore
        from comet.train import TrainConfig, train

        key = (name, kind, n_c, seed)
        if key in self.models:
            return self.models[key]
        path = None
        if self.cache_dir:
            path = os.path.join(self.cache_dir, f"{name}_{kind}{n_c}_s{seed}.json")
            if os.path.exists(path):
                self.models[key] = ParamStore.load(path)
                return self.models[key]
        system = get_system(name)
        cfg = ModelConfig(kind, system.n_s, n_c, system.n_x, DESK["hidden_layers"],
                          DESK["hidden_width"], seed)
        store, _ = train(cfg, self.dataset(name, seed), TrainConfig(epochs=DESK["epochs"],
                                                                    seed=seed))
        if path:
            os.makedirs(self.cache_dir, exist_ok=True)
            store.save(path)
        self.models[key] = store
        return store


@pytest.fixture(scope="session")
def trainer():
    return Trainer(os.environ.get("COMET_ACCEPTANCE_CACHE"))


def _rollout_report(store, name, seed):
    from comet.evaluate import rollout_rmse

    return rollout_rmse(store, name, n_sims=DESK["n_sims"], t_end=DESK["t_end"],
                        n_points=DESK["n_points"], seed=1000 + seed)


@pytest.mark.slow
def test_c6_desk_table_ordering(criterion, trainer):
    t0 = time.perf_counter()
    cases = [("damped-pendulum", ("comet", 2), ("node", 0)),
             ("lotka-volterra", ("comet", 1), ("hnn", 0))]
    parts, ok = [], True
    for name, (k1, n1), (k2, n2) in cases:
        wins, pairs = 0, []
        for seed in SEEDS:
            a = _rollout_report(trainer.model(name, k1, n1, seed), name, seed).median
            b = _rollout_report(trainer.model(name, k2, n2, seed), name, seed).median
            wins += a < b
            pairs.append(f"{a:.3g}/{b:.3g}")
        ok &= wins >= 2
        parts.append(f"{name} COMET/{k2.upper()} median RMSE {', '.join(pairs)} ({wins}/3)")
    elapsed = time.perf_counter() - t0
    criterion(6, ok and elapsed < 1800, "; ".join(parts) + f"; {elapsed / 60:.1f} min")


@pytest.mark.slow
def test_c7_pendulum_drift(criterion, trainer):
    from comet.evaluate import conservation_drift, initial_conditions

    system = get_system("pendulum")
    wins, pairs = 0, []
    for seed in SEEDS:
        drift = {}
        for kind, n_c in (("comet", 3), ("node", 0)):
            store = trainer.model("pendulum", kind, n_c, seed)
            per_ic = [conservation_drift(store, system, s0, t_end=50.0, n_points=500)
                      .max_abs("length") for s0, _ in initial_conditions(system, 5, 2000 + seed)]
            drift[kind] = float(np.median(per_ic))
        wins += drift["comet"] < drift["node"] / 5
        pairs.append(f"{drift['comet']:.3g}/{drift['node']:.3g}")
    criterion(7, wins >= 2,
              f"median max length drift COMET/NODE {', '.join(pairs)} ({wins}/3 below 1/5)")


@pytest.mark.slow
def test_c10_two_body_partial_constants(criterion, trainer):
    wins, pairs = 0, []
    for seed in SEEDS:
        reps = [_rollout_report(trainer.model("two-body", "comet", n_c, seed), "two-body", seed)
                for n_c in (1, 2)]
        # p97.5 over completed rollouts, failures reported alongside; nan never wins
        wins += bool(reps[1].p_hi <= reps[0].p_hi)
        pairs.append(f"{reps[1].p_hi:.3g}/{reps[0].p_hi:.3g} "
                     f"(fail {reps[1].n_fail}/{reps[0].n_fail})")
    criterion(10, wins >= 2, f"two-body p97.5 RMSE n_c=2 vs n_c=1 {', '.join(pairs)} "
                             f"of {DESK['n_sims']} rollouts ({wins}/3)")


# ---------------------------------------------------------------- constants-counting scans

SCAN = dict(n_traj=10, epochs=1000, n_seeds=3)


def _scan(name, hidden_layers, hidden_width):
    from comet.train import scan_ncom

    data = generate_dataset(name, n_traj=SCAN["n_traj"], noise=0.0, seed=0)
    t0 = time.perf_counter()
    result = scan_ncom(data, None, n_seeds=SCAN["n_seeds"], epochs=SCAN["epochs"],
                       hidden_layers=hidden_layers, hidden_width=hidden_width)
    return result.relative(), time.perf_counter() - t0


def _fmt(rel):
    return ", ".join(f"{k}:{m:.3g}" for k, (m, _) in rel.items())


@pytest.mark.slow
def test_c8_scan_jump(criterion):
    damped, t1 = _scan("damped-pendulum", DESK["hidden_layers"], DESK["hidden_width"])
    spring, t2 = _scan("nonlinear-spring", DESK["hidden_layers"], DESK["hidden_width"])
    ok = all(r[n][0] < 3 for r in (damped, spring) for n in (1, 2))
    ok &= damped[3][0] > 5 and spring[3][0] > 5
    minutes = (t1 + t2) / 60
    criterion(8, ok and minutes < 45,
              f"relative L1 damped pendulum {{{_fmt(damped)}}}, nonlinear spring "
              f"{{{_fmt(spring)}}}; {minutes:.1f} min")


@pytest.mark.slow
def test_c9_undersized_network(criterion):
    rel, _ = _scan("nonlinear-spring", 1, 50)
    # jump after n_c = 1: n_c = 1 stays below the threshold, n_c = 2 exceeds it
    ok = rel[1][0] < 3 and rel[2][0] > 5
    criterion(9, ok, f"1x50 network, relative L1 {{{_fmt(rel)}}}")


@pytest.mark.skipif(os.environ.get("COMET_FULL_SCALE") != "1",
                    reason="full-scale run takes hours; set COMET_FULL_SCALE=1")
def test_c11_full_scale_mass_spring(criterion):
    from comet.evaluate import rollout_rmse
    from comet.train import TrainConfig, train

    data = generate_dataset("mass-spring", seed=0)
    store, _ = train(ModelConfig("comet", 2, 1, 0, 3, 250, 0), data, TrainConfig(epochs=1000))
    rep = rollout_rmse(store, "mass-spring", n_sims=100, t_end=100.0, n_points=1000)
    criterion(11, 0.01 <= rep.median <= 0.5,
              f"median RMSE {rep.median:.3g} [{rep.p_lo:.3g}, {rep.p_hi:.3g}], {rep.n_fail} failed")
