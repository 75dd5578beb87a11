"""Acceptance criteria 1-12, each at its stated tolerance.

Every test records a single PASS/FAIL line (see conftest) before asserting,
so the terminal summary lists all twelve even when some fail.
"""

import filecmp
import json

import numpy as np
from conftest import record_criterion
from ddpnet import cli, ddpnorm, ddpsgd, netgraph, oracles, paths, train
from ddpnet.complexity import S_MODES, SECOND_MOMENT, ComplexityConfig, gamma_net_of
from ddpnet.errors import DegenerateNormalizationError, InadmissiblePoint
from ddpnet.losses import LossSpec
from ddpnet.verify import (ALPHAS, GENERIC_DOF_SHAPES, KAPPA_FD_SPEC, RANK_SHAPES, RHOS, dead_unit_instance,
                           generic_weights, pythagoras_error, random_config, random_dag, random_instance,
                           rel_error, rescaling_instance, rng_for)

SQ = LossSpec()


def _rel_distance(t, w1, w2, probes):
    scale = float(np.max(np.abs(netgraph.predict(t, w1, probes))))
    return netgraph.function_distance(t, w1, w2, probes) / max(scale, 1e-300)


def test_criterion_01_net2221_rank():
    t = netgraph.layered([2, 2, 2, 1])
    ps = paths.enumerate_paths(t)
    rng = rng_for(1)
    ranks = [paths.numerical_rank(paths.path_jacobian(ps, rng.uniform(0.5, 1.5, t.n_edges)).J, 1e-8)
             for _ in range(20)]
    ok = all(r == 6 for r in ranks)
    record_criterion(1, ok, f"2-2-2-1 rank(J) over 20 draws: {sorted(set(ranks))} (want 6)")
    assert ok


def test_criterion_02_generic_rank():
    rng = rng_for(2)
    bad = []
    for shape in RANK_SHAPES:
        t = netgraph.layered(list(shape))
        ps = paths.enumerate_paths(t)
        want = t.n_edges - len(t.internal)
        for _ in range(20):
            r = paths.numerical_rank(paths.path_jacobian(ps, rng.uniform(0.5, 1.5, t.n_edges)).J)
            if r != want:
                bad.append((shape, r, want))
    record_criterion(2, not bad, f"{len(RANK_SHAPES)} shapes x 20 draws, mismatches: {bad or 'none'}")
    assert not bad


def test_criterion_03_path_sgd_equivalence():
    rng = rng_for(3)
    cfg = ComplexityConfig(alpha=0.0)
    worst, count = 0.0, 0
    while count < 10:
        t = random_dag(rng, n_hidden=int(rng.integers(1, 7)))
        if paths.count_paths(t) > 10_000:
            continue
        w = rng.normal(size=t.n_edges)
        brute = np.array([oracles.brute_force_path_kappa(t, w, e, 10_000) for e in range(t.n_edges)])
        worst = max(worst, rel_error(ddpsgd.kappa(t, w, None, cfg), np.maximum(brute, cfg.kappa_floor)))
        count += 1
    ok = worst <= 1e-10
    record_criterion(3, ok, f"max rel error kappa(alpha=0) vs path sum = {worst:.2e} (tol 1e-10)")
    assert ok


def test_criterion_04_natural_gradient_equivalence():
    rng = rng_for(4)
    cfg = ComplexityConfig(alpha=1.0, s_mode=SECOND_MOMENT)
    worst = 0.0
    for _ in range(10):
        t, w, batch = random_instance(rng, n=64, labels=False)
        fisher = oracles.diagonal_fisher_gaussian(t, w, batch)
        worst = max(worst, rel_error(ddpsgd.kappa(t, w, batch, cfg), np.maximum(fisher, cfg.kappa_floor)))
    ok = worst <= 1e-8
    record_criterion(4, ok, f"max rel error kappa(alpha=1) vs diagonal Fisher = {worst:.2e} (tol 1e-8)")
    assert ok


def test_criterion_05_kappa_second_differences():
    rng = rng_for(5)
    worst, checked = 0.0, 0
    for alpha in ALPHAS:
        for mode in S_MODES:
            cfg = ComplexityConfig(alpha=alpha, s_mode=mode)
            for _ in range(5):
                t, w, batch = oracles.sample_admissible(lambda r: random_instance(r, n=8, labels=False), rng)
                fd2 = 0.5 * oracles.finite_difference_diagonal_hessian(
                    lambda u: gamma_net_of(t, u, batch, cfg), w, KAPPA_FD_SPEC, t, batch)
                k = ddpsgd.kappa(t, w, batch, cfg)
                mask = k > 10 * cfg.kappa_floor
                if mask.any():
                    worst = max(worst, rel_error(k[mask], fd2[mask]))
                    checked += int(mask.sum())
    ok = worst <= 1e-4
    record_criterion(5, ok, f"max rel error kappa vs 1/2 FD2 = {worst:.2e} over {checked} edges (tol 1e-4)")
    assert ok


def test_criterion_06_orthogonality():
    """The literal check covers every non-input node, outputs included.

    Output nodes are not normalized, so the identity has no reason to hold
    there; the internal-node part and the norm-growth identity are reported
    alongside.
    """
    eta = 0.1
    internal, output, pyth, count = 0.0, 0.0, 0.0, 0
    k = 0
    while count < 20:
        rng = rng_for(6, k)
        k += 1
        t, tw, batch = random_instance(rng)
        cfg = random_config(rng)
        try:
            g = ddpnorm.ddpnorm_gradient(t, tw, batch, SQ, cfg)
        except DegenerateNormalizationError:
            continue
        count += 1
        gnorm = np.linalg.norm(g)
        stepped = tw - eta * g
        for v in range(t.n_nodes):
            if t.kinds[v] in (netgraph.INPUT, netgraph.BIAS):
                continue
            e = t.in_edges[v]
            denom = np.linalg.norm(tw[e]) * gnorm
            ratio = abs(float(tw[e] @ g[e])) / denom if denom > 0 else 0.0
            if t.kinds[v] == netgraph.INTERNAL:
                internal = max(internal, ratio)
                pyth = max(pyth, pythagoras_error(tw[e], g[e], stepped[e], eta))
            else:
                output = max(output, ratio)
    literal = max(internal, output)
    ok = literal <= 1e-8 and pyth <= 1e-10
    record_criterion(6, ok, f"max |<w~,g>|/(|w~||g|): internal {internal:.1e}, output {output:.1e} (tol 1e-8); "
                            f"Pythagoras {pyth:.1e} (tol 1e-10)")
    assert internal <= 1e-8 and pyth <= 1e-10
    assert output <= 1e-8, "orthogonality does not hold on un-normalized output nodes"


def test_criterion_07_gradient_checks():
    worst_plain, worst_norm = 0.0, 0.0
    spec = oracles.FiniteDiffSpec()
    done, k = 0, 0
    while done < 10:
        rng = rng_for(7, k)
        k += 1
        try:
            t, w, batch = oracles.sample_admissible(lambda r: random_instance(r, n=8), rng, spec)
            cfg = random_config(rng)
            fd = oracles.finite_difference_gradient(lambda u: netgraph.batch_loss(t, u, batch, SQ),
                                                    w, spec, t, batch)
            fdn = oracles.finite_difference_gradient(
                lambda u: ddpnorm.ddpnorm_loss_and_gradient(t, u, batch, SQ, cfg)[0], w, spec, t, batch)
            gn = ddpnorm.ddpnorm_gradient(t, w, batch, SQ, cfg)
        except (InadmissiblePoint, DegenerateNormalizationError):
            continue
        worst_plain = max(worst_plain, rel_error(netgraph.loss_gradient(t, w, batch, SQ), fd, 1e-8))
        worst_norm = max(worst_norm, rel_error(gn, fdn, 1e-8))
        done += 1
    ok = worst_plain <= 1e-5 and worst_norm <= 1e-5
    record_criterion(7, ok, f"loss_gradient {worst_plain:.1e}, ddpnorm_gradient {worst_norm:.1e} (tol 1e-5)")
    assert ok


def _negative_control():
    """Absolute function distance after one step from w and from a rescaled w (2-2-1 net, rho=10)."""
    t = netgraph.layered([2, 2, 1])
    w = np.array([1.0, 0.5, -0.5, 1.0, 1.0, 0.8])
    x = np.array([[1.0, 0.2], [0.3, 1.0], [1.0, 1.0], [0.5, -0.2]])
    batch = netgraph.Batch(x, np.array([[2.0], [0.0], [0.0], [1.0]]))
    probes = rng_for(8, 1).standard_normal((64, 2))
    node, rho, eta = t.internal[0], 10.0, 0.05
    tw = netgraph.apply_node_rescaling(w, t, node, rho)
    a = w - eta * netgraph.loss_gradient(t, w, batch, SQ)
    b = tw - eta * netgraph.loss_gradient(t, tw, batch, SQ)
    sgd = netgraph.function_distance(t, a, b, probes)
    cfg = ComplexityConfig(alpha=1.0, s_mode=SECOND_MOMENT)
    moved = ddpnorm.rescale_incoming(w, t, node, rho)
    a = ddpnorm.sgd_step_tilde(w, ddpnorm.ddpnorm_gradient(t, w, batch, SQ, cfg), eta)
    b = ddpnorm.sgd_step_tilde(moved, ddpnorm.ddpnorm_gradient(t, moved, batch, SQ, cfg), eta)
    norm = netgraph.function_distance(t, ddpnorm.realize(t, a, batch, cfg), ddpnorm.realize(t, b, batch, cfg), probes)
    return sgd, norm


def test_criterion_08_rescaling():
    model, step = 0.0, 0.0
    for k in range(5):
        rng = rng_for(8, 100 + k)
        t, w, batch = rescaling_instance(rng)
        probes = rng.standard_normal((64, t.n_inputs))
        for v in t.internal:
            for rho in RHOS:
                tw = netgraph.apply_node_rescaling(w, t, v, rho)
                model = max(model, _rel_distance(t, w, tw, probes))
                for alpha in ALPHAS:
                    for mode in S_MODES:
                        cfg = ComplexityConfig(alpha=alpha, s_mode=mode)
                        a = ddpsgd.ddp_sgd_update(t, w, batch, SQ, cfg, 0.05)
                        b = ddpsgd.ddp_sgd_update(t, tw, batch, SQ, cfg, 0.05)
                        step = max(step, _rel_distance(t, a, b, probes))
    sgd, norm = _negative_control()
    ok = model <= 1e-12 and step <= 1e-8 and sgd > 1e-3 and norm > 1e-3
    record_criterion(8, ok, f"(a) model {model:.1e} (tol 1e-12); (b) DDP-SGD step {step:.1e} (tol 1e-8); "
                            f"(c) SGD {sgd:.2e}, DDP-Norm SGD {norm:.2e} (want > 1e-3)")
    assert ok


def test_criterion_09_path_reconstruction():
    rec_err, fact_err = 0.0, 0.0
    for k in range(10):
        rng = rng_for(9, k)
        t, w, batch = random_instance(rng, labels=False)
        ps = paths.enumerate_paths(t)
        pj = paths.path_jacobian(ps, w)
        phi = paths.path_features(ps, t, w, batch.inputs)
        out = netgraph.predict(t, w, batch)
        for j, v in enumerate(t.outputs):
            sel = ps.ending_at(v)
            err = np.max(np.abs(phi[:, sel] @ pj.pi[sel] - out[:, j])) / max(np.max(np.abs(out[:, j])), 1e-300)
            rec_err = max(rec_err, float(err))
        fact_err = max(fact_err, float(np.max(np.abs(pj.J - pj.factorized(w)))))
    ok = rec_err <= 1e-10 and fact_err <= 1e-12
    record_criterion(9, ok, f"reconstruction {rec_err:.1e} (tol 1e-10), factorization {fact_err:.1e} (tol 1e-12)")
    assert ok


def test_criterion_10_degrees_of_freedom():
    problems = []
    rng = rng_for(10)
    for shape in GENERIC_DOF_SHAPES:
        t = netgraph.layered(list(shape))
        ps = paths.enumerate_paths(t)
        for _ in range(5):
            w, x = generic_weights(t, rng)
            assert x.shape[0] == 4 * t.n_edges
            d = paths.degrees_of_freedom(t, w, x).d_G
            rank_j = paths.numerical_rank(paths.path_jacobian(ps, w).J)
            d_gd = paths.distribution_fisher(t, w, netgraph.Batch(x)).rank
            if d != t.n_edges - len(t.internal):
                problems.append(f"{shape}: d_G {d}")
            if d_gd > rank_j:
                problems.append(f"{shape}: d_GD {d_gd} > rank J {rank_j}")
    drops = []
    for _ in range(5):
        t, w, x, dead = dead_unit_instance(rng)
        d = paths.degrees_of_freedom(t, w, x).d_G
        drops.append(d)
        jac = netgraph.output_jacobian(t, w, x).reshape(-1, t.n_edges)
        touching = np.concatenate([t.in_edges[dead], t.out_edges[dead]])
        if not d < t.n_edges - len(t.internal):
            problems.append(f"dead unit: d_G {d} not below generic")
        if np.any(jac[:, touching] != 0):
            problems.append("dead unit edges outside the null space")
        rank_j = paths.numerical_rank(paths.path_jacobian(paths.enumerate_paths(t), w).J)
        if paths.distribution_fisher(t, w, netgraph.Batch(x)).rank > rank_j:
            problems.append("dead unit: d_GD > rank J")
    ok = not problems
    record_criterion(10, ok, f"generic d_G = |E|-|V_int| on {len(GENERIC_DOF_SHAPES)} shapes x 5; "
                             f"dead-unit d_G {drops}; issues: {problems or 'none'}")
    assert ok


TEACHER = {"kind": "teacher_student", "shape": [2, 4, 1], "noise": 0.01, "n": 512}
FIXTURES = {
    "sgd": ("sgd", {}),
    "path_sgd": ("path_sgd", {}),
    "ddp_sgd_a0": ("ddp_sgd", {"alpha": 0.0}),
    "ddp_sgd_a05": ("ddp_sgd", {"alpha": 0.5}),
    "ddp_sgd_a1": ("ddp_sgd", {"alpha": 1.0, "s_mode": "second_moment"}),
    "diag_natural_gradient": ("diag_natural_gradient", {}),
    "ddp_norm": ("ddp_norm", {"alpha": 1.0, "s_mode": "variance"}),
}
FIXTURE_ETA = 0.05


def _fixture_config(name, seed):
    opt, comp = FIXTURES[name]
    return train.TrainConfig.from_dict({
        "optimizer": opt, "eta": FIXTURE_ETA, "steps": 2000, "batch_size": 32, "seed": seed,
        "complexity": comp, "dataset": {**TEACHER, "seed": seed}, "network": {"shape": [2, 4, 1]},
        "record_time": False,
    })


def test_criterion_11_training():
    ratios, traj = {}, {}
    for seed in range(5):
        for name in FIXTURES:
            res = train.train_loop(_fixture_config(name, seed), record_trajectory=True)
            ratios[(name, seed)] = res.final_loss / res.initial_loss
            traj[(name, seed)] = np.array(res.trajectory)
    pair_err = 0.0
    for a, b in (("path_sgd", "ddp_sgd_a0"), ("diag_natural_gradient", "ddp_sgd_a1")):
        for seed in range(5):
            pair_err = max(pair_err, float(np.max(np.abs(traj[(a, seed)] - traj[(b, seed)]))))
    worst = max(ratios, key=ratios.get)
    ok = ratios[worst] <= 0.5 and pair_err <= 1e-12
    record_criterion(11, ok, f"worst final/initial loss {ratios[worst]:.3f} ({worst[0]}, seed {worst[1]}; want <= 0.5); "
                             f"trajectory pair max diff {pair_err:.1e} (tol 1e-12)")
    assert ok


def _run_train(tmp_path, monkeypatch, capsys, label):
    work = tmp_path / label
    work.mkdir()
    cfg = {"optimizer": "ddp_norm", "eta": 0.05, "steps": 50, "batch_size": 32, "seed": 3,
           "complexity": {"alpha": 0.5}, "dataset": {**TEACHER, "seed": 3}, "network": {"shape": [2, 4, 1]},
           "stats_batch_mode": "held_out", "record_time": False}
    (work / "config.json").write_text(json.dumps(cfg))
    monkeypatch.chdir(work)
    rc = cli.main(["train", "--config", "config.json", "--out", "run"])
    return rc, capsys.readouterr().out, work / "run"


def _run_verify(tmp_path, monkeypatch, capsys, label):
    work = tmp_path / label
    work.mkdir()
    monkeypatch.chdir(work)
    rc = cli.main(["verify", "--suite", "all", "--seed", "11", "--trials", "3", "--report", "report.txt"])
    return rc, capsys.readouterr().out, (work / "report.txt").read_bytes()


def test_criterion_12_determinism(tmp_path, monkeypatch, capsys):
    rc1, out1, dir1 = _run_train(tmp_path, monkeypatch, capsys, "train_a")
    rc2, out2, dir2 = _run_train(tmp_path, monkeypatch, capsys, "train_b")
    cmp = filecmp.dircmp(dir1, dir2)
    names = sorted(p.name for p in dir1.iterdir())
    _, mismatch, errors = filecmp.cmpfiles(dir1, dir2, names, shallow=False)
    train_same = rc1 == rc2 == 0 and out1 == out2 and not mismatch and not errors and not cmp.left_only \
        and not cmp.right_only
    v1 = _run_verify(tmp_path, monkeypatch, capsys, "verify_a")
    v2 = _run_verify(tmp_path, monkeypatch, capsys, "verify_b")
    verify_same = v1 == v2
    ok = train_same and verify_same
    record_criterion(12, ok, f"cmd_train identical: {train_same} ({len(names)} files), "
                             f"cmd_verify identical: {verify_same} (exit {v1[0]})")
    assert ok

