"""Quantitative acceptance checks at desk scale.

Each test records one PASS/FAIL line (shown in the terminal summary) and
then asserts the same condition.
"""

import time

import numpy as np
import pytest

from crgat import baselines as bl
from crgat.autodiff import finite_diff_check
from crgat.channels import ScenarioConfig, generate_dataset
from crgat.checkpoint import checkpoint_bytes
from crgat.errors import InfeasibleError
from crgat.cli import main
from crgat.evaluation import build_report, mad, mad_per_layer
from crgat.model import CrgatConfig, calibrate_batch_norm, forward, init_params, predict
from crgat.oracle import brute_force_oracle
from crgat.training import LdmState, TrainConfig, evaluate_rates, pm_loss, rates, train_ldm, train_pm

from conftest import crandn, record, small_model
from test_evaluation import mad_loops

pytestmark = pytest.mark.slow

R_REQ = 0.5


def test_gradient_correctness():
    start = time.perf_counter()
    worst, checked = 0.0, 0
    for seed in range(5):
        params = small_model(n_t=4, k=3, seed=seed, heads=2)
        h = 3 * crandn(np.random.default_rng([seed, 7]), 6, 3, 4)

        def loss(tape, leaves):
            w = forward(h, params, "train", weights=leaves, track_stats=False)
            return pm_loss(h, w, 10.0, 1.0)

        rep = finite_diff_check(loss, dict(params.named()))
        worst, checked = max(worst, rep.max_rel_error), checked + rep.n_checked
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 60 and checked > 0
    assert record("gradient-correctness", ok, f"max rel err {worst:.2e} over {checked} coords, {elapsed:.1f}s")


def test_power_feasibility():
    params = small_model(k=4)
    rng = np.random.default_rng(2)
    h = crandn(rng, 10_000, 4, 4) * 10 ** rng.uniform(-3, 3, (10_000, 1, 1))
    worst = 0.0
    for p_max in (1.0, 2.0, 3.0):
        w = np.concatenate([predict(h[s : s + 2000], params, p_max) for s in range(0, 10_000, 2000)])
        worst = max(worst, float(np.max(np.sum(np.abs(w) ** 2, axis=(1, 2)) / p_max)))
    assert record("power-feasibility", worst <= 1 + 1e-12, f"max ||W||^2/P_max = {worst:.15f}")


def test_permutation_equivariance():
    worst = 0.0
    for k, seed in ((3, 0), (5, 1)):
        params = small_model(k=k, seed=seed)
        rng = np.random.default_rng(seed)
        h = crandn(rng, 500, k, 4) * 3
        perm = np.argsort(rng.random((500, k)), axis=1)[:, :, None]
        out = predict(np.take_along_axis(h, perm, axis=1), params)
        ref = np.take_along_axis(predict(h, params), perm, axis=1)
        worst = max(worst, float(np.max(np.abs(out - ref))))
    assert record("permutation-equivariance", worst <= 1e-9, f"max deviation {worst:.2e} over 1000 pairs")


def test_user_count_scalability():
    params = init_params(CrgatConfig.full_size(4), 0)
    calibrate_batch_norm(params, crandn(np.random.default_rng(0), 16, 6, 4))
    before = checkpoint_bytes(params)
    shapes, sizes = [], set()
    for k in range(3, 10):
        w = predict(crandn(np.random.default_rng(k), 2, k, 4), params)
        shapes.append(w.shape == (2, k, 4) and np.all(np.isfinite(w)))
        sizes.add(params.nbytes())
    ok = all(shapes) and len(sizes) == 1 and checkpoint_bytes(params) == before
    assert record("user-count-scalability", ok, f"K=3..9 ran, parameter bytes {sizes}")


def _feasible_within(h, w, p_max, r_req, tol):
    return np.sum(np.abs(w) ** 2) <= p_max + tol and np.min(bl.user_rates(h, w)) >= r_req - tol


def test_oracle_sca_agreement():
    # draw until 50 feasible instances; infeasible draws must be confirmed by the oracle
    start = time.perf_counter()
    h_all = generate_dataset(ScenarioConfig(2, 2, r_req=R_REQ, seed=21), 80, kind="B").h
    gaps, monotone, feasible, skipped, confirmed = [], True, True, 0, True
    for h in h_all:
        if len(gaps) == 50:
            break
        o = brute_force_oracle(h, 1.0, R_REQ)
        try:
            s = bl.sca_solve(h, 1.0, R_REQ)
        except InfeasibleError:
            skipped += 1
            confirmed &= not o.feasible
            continue
        gaps.append(abs(s.sum_rate - o.sum_rate) / o.sum_rate)
        monotone &= bool(np.all(np.diff(s.trace) >= -1e-10))
        feasible &= _feasible_within(h, s.w, 1.0, R_REQ, 1e-8) and _feasible_within(h, o.w, 1.0, R_REQ, 1e-8)
    elapsed = time.perf_counter() - start
    ok = len(gaps) == 50 and max(gaps) <= 0.02 and monotone and feasible and confirmed and elapsed < 600
    detail = (
        f"max rel gap {max(gaps):.2e} over {len(gaps)}, monotone={monotone}, feasible={feasible}, "
        f"{skipped} infeasible draws (oracle agrees={confirmed}), {elapsed:.0f}s"
    )
    assert record("oracle-sca-agreement", ok, detail)


def test_zf_mrt_correctness():
    rng = np.random.default_rng(6)
    cross, mrt_err, wf_err, skipped = 0.0, 0.0, 0.0, 0
    for i in range(1000):
        k = 2 + i % 2
        h = crandn(rng, k, 4) * 3
        if np.linalg.cond(h) > 1e3:
            skipped += 1
            continue
        d = bl.zf_directions(h)
        s = np.abs(bl.cross_gains(h, d))
        cross = max(cross, float(np.max(s - np.diag(np.diag(s)))))
        m = bl.mrt_directions(h)
        mrt_err = max(mrt_err, float(np.max(np.abs(np.abs(np.diag(bl.cross_gains(h, m))) - np.linalg.norm(h, axis=1)))))
        g = np.abs(np.diag(bl.cross_gains(h, d))) ** 2
        p_min = (2**R_REQ - 1) / g
        if p_min.sum() > 1.0:
            continue
        got = bl.power_only_sca(h, d, 1.0, R_REQ).sum_rate
        wf_err = max(wf_err, abs(got - np.sum(np.log2(1 + g * bl.waterfill_floors(g, 1.0, p_min)))))
    ok = cross <= 1e-10 and mrt_err <= 1e-12 and wf_err <= 1e-3
    detail = f"ZF cross {cross:.1e}, MRT err {mrt_err:.1e}, water-filling err {wf_err:.1e}, {skipped} ill-conditioned skipped"
    assert record("zf-mrt-correctness", ok, detail)


# --- desk-scale training -------------------------------------------------------------

DESK = dict(epochs=120, batch_size=64, r_req=R_REQ, learning_rate=3e-3, lam=20.0, phase_augment=True)


@pytest.fixture(scope="module")
def desk():
    data = generate_dataset(ScenarioConfig(4, 2, r_req=R_REQ, seed=7), 2400, sizes=(2000, 200, 200))
    ref = np.array([brute_force_oracle(h, 1.0, R_REQ).sum_rate for h in data.test])
    scale = 1.0 / float(np.sqrt(np.mean(np.abs(data.train) ** 2)))
    arch = CrgatConfig.build(4, head_dims=(32, 32), heads=(8, 8), dense_dims=(256,), input_scale=scale)
    return data, ref, arch


@pytest.fixture(scope="module")
def desk_runs(desk):
    data, ref, arch = desk
    start = time.process_time()
    pm, _ = train_pm(data, init_params(arch, 0), TrainConfig(**DESK))
    pm_report = build_report(evaluate_rates(pm, data.test), ref, R_REQ, label="pm")
    pm_cpu = time.process_time() - start
    ldm, state, ldm_log = train_ldm(data, init_params(arch, 0), TrainConfig(loss="ldm", tau=1e-2, **DESK))
    ldm_report = build_report(evaluate_rates(ldm, data.test), ref, R_REQ, label="ldm")
    return pm_report, pm_cpu, ldm_report, ldm_log


def test_desk_scale_training(desk_runs):
    pm, cpu, ldm, _ = desk_runs
    ok_pm = pm.optimality_performance >= 85 and pm.feasibility_rate >= 95 and cpu <= 600 and not pm.flags
    ok_ldm = ldm.feasibility_rate >= pm.feasibility_rate - 2
    detail = (
        f"PM OP {pm.optimality_performance:.2f}% FR {pm.feasibility_rate:.1f}% CPU {cpu:.0f}s; "
        f"LDM OP {ldm.optimality_performance:.2f}% FR {ldm.feasibility_rate:.1f}%"
    )
    assert record("desk-scale-training", ok_pm and ok_ldm, detail)


def test_ldm_mechanics(desk_runs):
    _, _, _, log = desk_runs
    mus = np.array([r.mu for r in log.records])
    rising = bool(np.all(np.diff(mus, axis=0) >= 0))
    # toy model: single-user MRT at full power always meets the requirement
    rng = np.random.default_rng(0)
    state = LdmState(np.array([0.3]), tau=1.0)
    for _ in range(5):
        h = crandn(rng, 64, 1, 4) * 3
        w = h / np.linalg.norm(h, axis=-1, keepdims=True)
        r = rates(h, w)
        state.accumulate(r, float(np.min(r)))
        state.end_epoch()
    constant = bool(np.all(state.mu == 0.3))
    data = generate_dataset(ScenarioConfig(3, 2, seed=1), 60, sizes=(40, 10, 10))
    arch = CrgatConfig.build(3, head_dims=(4,), heads=(2,), dense_dims=(8,))
    _, s0, _ = train_ldm(data, init_params(arch, 0), TrainConfig(loss="ldm", epochs=3, r_req=0.0, tau=1.0))
    constant &= bool(np.all(s0.mu == 0))
    detail = f"desk mu {mus[0].round(3).tolist()} -> {mus[-1].round(3).tolist()} non-decreasing={rising}, toy constant={constant}"
    assert record("ldm-mechanics", rising and constant, detail)


def test_mad_oracle_and_ablation(desk):
    rng = np.random.default_rng(9)
    err = max(abs(mad(x) - mad_loops(x)) for x in (crandn(rng, k, f) for k in (2, 3, 5, 8) for f in (1, 4, 16)))
    data, _, arch = desk
    cfg = TrainConfig(**{**DESK, "epochs": 40})
    full, _ = train_pm(data, init_params(arch, 0), cfg)
    plain, _ = train_pm(data, init_params(arch.without_residual(), 0), cfg)
    m_full = mad_per_layer(full, data.test, "full").values
    m_plain = mad_per_layer(plain, data.test, "no_residual").values
    pattern = m_full[-1] > m_plain[-1]
    flag = "" if pattern else " [FLAG: expected pattern not observed, report only]"
    detail = f"oracle err {err:.1e}; MAD full {np.round(m_full, 4).tolist()} no-residual {np.round(m_plain, 4).tolist()}{flag}"
    assert record("mad", err <= 1e-12 and len(m_plain) == 2, detail)


def test_determinism(tmp_path):
    cfg = tmp_path / "exp.cfg"
    cfg.write_text(
        "seed = 17\nscenario.n_t = 4\nscenario.k_users = 2\nscenario.r_req = 0.5\n"
        "model.head_dims = 8, 8\nmodel.heads = 2, 2\nmodel.dense_dims = 16\nmodel.input_scale = auto\n"
        "training.epochs = 3\ntraining.phase_augment = true\n"
    )
    blobs = []
    for tag in ("a", "b"):
        rc = main(["gen-data", "--config", str(cfg), "--out", str(tmp_path / f"{tag}.bin"), "--count", "220"])
        rc |= main(["train", "--config", str(cfg), "--data", str(tmp_path / f"{tag}.bin"), "--out", str(tmp_path / f"{tag}.crgw")])
        blobs.append(((tmp_path / f"{tag}.bin").read_bytes(), (tmp_path / f"{tag}.crgw").read_bytes(), rc))
    ok = blobs[0] == blobs[1] and blobs[0][2] == 0
    assert record("determinism", ok, f"dataset {len(blobs[0][0])} B, checkpoint {len(blobs[0][1])} B identical={ok}")
