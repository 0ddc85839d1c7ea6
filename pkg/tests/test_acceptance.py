"""Acceptance suite: one verdict line per criterion.

Criteria 1 to 7 are hard gates. Criteria 8 and 9 are directional soft gates
read from the cached desk-scale runs (``results/``); a miss is reported as
FAIL and the test is marked xfail. Criterion 10 is report-only.
Set ``CDERAIL_RECOMPUTE=1`` to rerun the cached experiments.
"""

import hashlib
import os
import time
from fractions import Fraction
from pathlib import Path

import numpy as np
import pytest
from bfs_oracle import BfsPolicy, brute_distance

from cderail.agents import AgentConfig, CdeAgent
from cderail.continual import Consolidation, ewc_penalty
from cderail.dqn import DqnConfig, ReplayBuffer, epsilon, td_update
from cderail.harness.evaluation import evaluate
from cderail.harness.experiments import ARMS, DESK_SCALE, DESK_SEEDS, desk_run_config, final_table, format_table, run_arm
from cderail.harness.oracles import chain_mdp, load_tiny_instance, tiny_exact_scheduler, value_iteration
from cderail.harness.scenarios import chain_behind_head_on, four_cycle, head_on, unblockable
from cderail.neuralnet import PAU, OptState, backward, forward, mlp_init, pau_backward, pau_forward
from cderail.railsim import Family, StageSpec, Status, detect_deadlocks, horizon, reset, step

FIXTURES = Path(__file__).parent / "fixtures" / "tiny"
RESULTS = Path(os.environ.get("CDERAIL_RESULTS", Path(__file__).parents[1] / "results"))
RECOMPUTE = os.environ.get("CDERAIL_RECOMPUTE") == "1"


def _rel_err(got, want):
    return float(np.max(np.abs(got - want)) / max(1e-8, np.max(np.abs(want)), np.max(np.abs(got))))


def _fd(f, x, h=1e-6):
    g = np.zeros_like(x)
    for i in range(x.size):
        orig = x.flat[i]
        x.flat[i] = orig + h
        up = f()
        x.flat[i] = orig - h
        down = f()
        x.flat[i] = orig
        g.flat[i] = (up - down) / (2 * h)
    return g


def test_criterion_1_gradient_checks(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst_pau, triples = 0.0, 0
    while triples < 100:
        a, b = rng.normal(size=6), rng.normal(size=4)
        x = rng.uniform(-2, 2, size=8)
        # the rational unit is not differentiable where its denominator polynomial crosses zero
        q = np.polyval(np.concatenate([b[::-1], [0.0]]), x)
        x = x[np.abs(q) > 1e-3]
        if x.size == 0:
            continue
        dy = rng.normal(size=x.shape)
        dx, da, db = pau_backward(a, b, x, dy)
        loss = lambda: float(pau_forward(a, b, x) @ dy)  # noqa: E731
        worst_pau = max(worst_pau, _rel_err(da, _fd(loss, a)), _rel_err(db, _fd(loss, b)), _rel_err(dx, _fd(loss, x)))
        triples += 1
    worst_net = 0.0
    for k in range(100):
        sizes = [int(rng.integers(1, 5)) for _ in range(int(rng.integers(1, 3)))]
        net = mlp_init(int(rng.integers(1, 5)), tuple(sizes), int(rng.integers(1, 5)), activation=PAU, seed=k)
        for act in net.activations:
            act.a += rng.normal(0, 0.1, 6)
            act.b += rng.normal(0, 0.1, 4)
        x = rng.normal(size=(3, net.sizes[0]))
        dq = rng.normal(size=(3, net.sizes[-1]))
        _, cache = forward(net, x)
        grads = backward(net, cache, dq)
        loss = lambda: float(np.sum(forward(net, x)[0] * dq))  # noqa: E731
        for p, g in zip(net.params(), grads):
            worst_net = max(worst_net, _rel_err(g, _fd(loss, p)))
    elapsed = time.perf_counter() - start
    ok = worst_pau < 1e-4 and worst_net < 1e-4 and elapsed < 60
    criterion(1, ok, f"100 PAU triples max rel err {worst_pau:.1e}; 100 nets max rel err {worst_net:.1e}; {elapsed:.1f}s")
    assert ok


def test_criterion_2_ewc_quadratic_law(criterion):
    rng = np.random.default_rng(7)
    lam, worst = 0.5, 0.0
    for trial in range(200):
        net = mlp_init(3, (4, 3), 2, seed=trial)
        star = [p.copy() for p in net.params()]
        fisher = [rng.exponential(size=p.shape) for p in star]
        cons = [Consolidation(star, fisher)]
        j = int(rng.integers(len(star)))
        idx = tuple(int(rng.integers(n)) for n in star[j].shape)
        delta = float(rng.normal() * 10 ** rng.uniform(-3, 1))
        base, _ = ewc_penalty(net, cons, lam)
        net.params()[j][idx] += delta
        pen, _ = ewc_penalty(net, cons, lam)
        # the exact increment is computed from the stored float64 anchor
        d = net.params()[j][idx] - star[j][idx]
        want = 0.5 * lam * fisher[j][idx] * d * d
        worst = max(worst, abs((pen - base) - want) / want)
    ok = worst < 1e-10
    criterion(2, ok, f"lambda=0.5, 200 random (F, delta): max rel err {worst:.1e}")
    assert ok


def test_criterion_3_epsilon_schedule(criterion):
    steps = np.arange(0, 3_000_001, 1009)
    values = np.array([epsilon(int(s)) for s in steps])
    mid = epsilon(138_629)
    ok = epsilon(0) == 1.0 and abs(mid - 0.5) <= 1e-3 and bool(np.all(np.diff(values) < 0))
    criterion(3, ok, f"eps(0)={epsilon(0)}, eps(138629)={mid:.6f}, strictly decreasing over {len(steps)} points")
    assert ok


def _pau_hash(net):
    h = hashlib.sha256()
    for act in net.activations:
        h.update(act.a.tobytes())
        h.update(act.b.tobytes())
    return h.hexdigest()


def test_criterion_4_cde_invariants(criterion):
    rng = np.random.default_rng(11)
    checks = {"cardinality": 0, "argmin": 0, "frozen": 0, "buffer": 0, "decision": 0}
    streams = 12
    for stream in range(streams):
        threshold = float(rng.choice([0.8, 1.0, 1.2]))
        cfg = AgentConfig(algo="cde", hidden=(6,), fisher_samples=64, epsilon_threshold=threshold)
        agent = CdeAgent(5, cfg, DqnConfig(batch_size=16, update_every=2, lr=1e-2), seed=stream)
        frozen: dict[int, str] = {}
        for task in range(5):
            if task:
                agent.task_boundary()
                assert len(agent.buffer) == 0
                checks["buffer"] += 1
                for a in agent.set.incumbents:
                    frozen.setdefault(a.uid, _pau_hash(a.net))
            for _ in range(int(rng.integers(4, 9))):
                for _ in range(10):
                    s = rng.normal(size=(2, 5)) + task
                    agent.observe_tick(s, agent.act(s), rng.normal(size=2), s + 0.1, rng.random(2) < 0.1)
                agent.end_episode(float(rng.random()), float(rng.choice([0.0, 0.5, 1.0])))
                assert len(agent.set.anchors) <= agent.set.n_max + 1
            for a in agent.set.anchors:
                if a.uid in frozen:
                    assert _pau_hash(a.net) == frozen[a.uid]
                    checks["frozen"] += 1
        agent.finish()
        assert 1 <= len(agent.set.anchors) <= agent.set.n_max
        checks["cardinality"] += 1
        for h in agent.set.history:
            w_old, w_trial = h["w_incumbents"], h["w_trial"]
            assert h["accepted"] == all(w_trial > h["threshold"] * w for w in w_old)
            checks["decision"] += 1
            if h["removed"] is not None:
                assert h["accepted"] and w_old[h["removed"]] == min(w_old)
                assert h["removed"] == min(i for i, w in enumerate(w_old) if w == min(w_old))
                checks["argmin"] += 1
    ok = all(checks.values())
    criterion(4, ok, f"{streams} five-task streams; checks passed: " + ", ".join(f"{k} {v}" for k, v in checks.items()))
    assert ok


def test_criterion_5_simulator_oracles(criterion):
    sizes = (4, 8, 16, 32)
    solved = 0
    for seed in range(100):
        n = sizes[seed % 4]
        spec = StageSpec(Family.PATHFINDING, n, n, 1, (0, 0, 0, 100), Fraction(0), 1)
        solved += evaluate(BfsPolicy(), spec, 1, seed).completion_mean == 1.0
    scenarios = 0
    for build in (head_on, four_cycle, chain_behind_head_on):
        st = build()
        scenarios += detect_deadlocks(st) == {t.id for t in st.trains} and unblockable(st, 3)
    rng = np.random.default_rng(5)
    specs = [
        StageSpec(Family.DEADLOCK, 32, 4, 16, (25, 25, 25, 25), Fraction(1, 64), switches=3),
        StageSpec(Family.MALFUNCTION, 12, 5, 8, (25, 25, 25, 25), Fraction(1, 100)),
        StageSpec(Family.SPARSE, 16, 16, 6, (25, 25, 25, 25), Fraction(1, 100)),
        StageSpec(Family.DEADLOCK, 32, 2, 4, (25, 25, 25, 25), Fraction(1, 20), switches=8),
    ]
    ticks, clashes, k = 0, 0, 0
    while ticks < 100_000:
        st = reset(specs[k % len(specs)], int(rng.integers(1 << 30)))
        k += 1
        done = False
        while not done:
            st, _, done = step(st, {t.id: int(rng.integers(5)) for t in st.trains}, inplace=True)
            cells = [t.position for t in st.trains if t.status is Status.ACTIVE]
            clashes += len(cells) != len(set(cells))
            ticks += 1
    ok = solved == 100 and scenarios == 3 and clashes == 0
    criterion(5, ok, f"BFS policy solved {solved}/100; deadlock scenarios {scenarios}/3; {ticks} fuzzed ticks, {clashes} shared cells")
    assert ok


def test_criterion_6_tiny_scheduler_and_travel_time(criterion):
    expected = {
        "direct": 20.2,
        "no_malfunction": 4.0,
        "triangle_shortcut": 10.0,
        "triangle_direct": 13.0,
        "square_two_trains": 17.0,
    }
    matched = sum(
        abs(tiny_exact_scheduler(load_tiny_instance(FIXTURES / f"{name}.txt"))[0] - want) < 1e-9
        for name, want in expected.items()
    )
    rng = np.random.default_rng(3)
    agree, runs = 0, 40
    for _ in range(runs):
        n = int(rng.choice([4, 8, 16]))
        k = int(rng.integers(1, 5))
        st = reset(StageSpec(Family.PATHFINDING, n, n, 1), int(rng.integers(1 << 30)))
        t = st.trains[0]
        t.speed = Fraction(1, k)
        st.max_ticks = horizon(n, n, st.trains)
        d = brute_distance(st.grid.masks, t.spawn, t.heading, t.target)
        policy = BfsPolicy()
        done = False
        while not done:
            st, _, done = step(st, {0: policy.action(st, 0)}, inplace=True)
        agree += st.trains[0].arrival_tick == int(np.ceil(d / Fraction(1, k)))
    ok = matched == len(expected) and agree == runs
    criterion(6, ok, f"tiny scheduler {matched}/{len(expected)} fixtures; travel ticks = ceil(d/v) in {agree}/{runs} runs")
    assert ok


def test_criterion_7_chain_dqn_matches_value_iteration(criterion):
    start = time.perf_counter()
    P, R, terminal = chain_mdp(5)
    _, q_star = value_iteration(P, R, 0.99)
    eye = np.eye(5)
    rng = np.random.default_rng(0)
    net = mlp_init(5, (), 2, seed=0)  # linear on one-hot states: a lookup table
    target = net.copy()
    cfg = DqnConfig(gamma=0.99, batch_size=32, lr=1e-2, target_tau=0.01)
    opt = OptState.for_network(net, lr=cfg.lr)
    buf = ReplayBuffer(10_000, 5)
    s = 0
    for _ in range(20_000):
        a = int(rng.integers(2))
        s2 = int(np.argmax(P[s, a]))
        buf.push_many(eye[[s]], [a], [R[s, a]], eye[[s2]], [terminal[s2]])
        s = 0 if terminal[s2] else s2
        if len(buf) >= cfg.batch_size:
            td_update(net, target, opt, buf.sample(cfg.batch_size, rng), cfg)
    q, _ = forward(net, eye[:4])
    err = float(np.max(np.abs(q - q_star[:4]) / np.abs(q_star[:4])))
    elapsed = time.perf_counter() - start
    ok = err < 0.05 and elapsed < 120
    criterion(7, ok, f"5-state chain, gamma 0.99: max rel Q error {err:.1e} vs value iteration; {elapsed:.1f}s")
    assert ok


# desk-scale directional reproductions


def _arm_results(names):
    run = desk_run_config(DESK_SCALE)
    return {n: [run_arm(ARMS[n], s, RESULTS, DESK_SCALE, run, RECOMPUTE) for s in DESK_SEEDS] for n in names}


def _soft(number, ok, detail, criterion):
    criterion(number, ok, detail)
    if not ok:
        pytest.xfail(f"criterion {number} direction not reproduced at desk scale")


@pytest.mark.desk
def test_criterion_8_curriculum_benefit(criterion):
    rows = final_table(_arm_results(["dqn-none", "dqn-custom"]))
    print(format_table(rows))
    none, custom = rows
    ok = (custom["median_completion"] >= none["median_completion"]
          and custom["median_score"] <= none["median_score"])
    detail = (f"median completion custom {custom['median_completion']:.3f} vs none {none['median_completion']:.3f}; "
              f"median score custom {custom['median_score']:.3f} vs none {none['median_score']:.3f}")
    assert len(custom["seeds"]) >= 5
    _soft(8, ok, detail, criterion)


@pytest.mark.desk
def test_criterion_9_cde_benefit(criterion):
    names = ["cde-custom", "dqn-custom", "dqn_ewc-custom", "dqn_pau-custom"]
    results = _arm_results(names)
    rows = final_table(results)
    print(format_table(rows))
    comp = {r["arm"]: r["completion"] for r in rows}
    wins = sum(all(comp["cde-custom"][i] >= comp[b][i] for b in names[1:]) for i in range(len(DESK_SEEDS)))
    med = {r["arm"]: r["median_completion"] for r in rows}
    ok = wins >= 3
    detail = (f"CDE >= every baseline in {wins}/{len(DESK_SEEDS)} seeds; medians "
              + ", ".join(f"{n} {med[n]:.3f}" for n in names))
    _soft(9, ok, detail, criterion)


@pytest.mark.desk
def test_criterion_10_order_robustness(criterion):
    groups = {
        "cde": ["cde-custom", "cde-custom-MPD", "cde-custom-MDP"],
        "dqn": ["dqn-custom", "dqn-custom-MPD", "dqn-custom-MDP"],
    }
    rows = final_table(_arm_results(groups["cde"] + groups["dqn"]))
    print(format_table(rows))
    med = {r["arm"]: r["median_completion"] for r in rows}
    spread = {k: max(med[n] for n in v) - min(med[n] for n in v) for k, v in groups.items()}
    ok = spread["cde"] <= spread["dqn"]
    # report-only: the verdict line states the outcome without gating the suite
    criterion(10, ok, f"report only; order range of median completion CDE {spread['cde']:.3f}, DQN {spread['dqn']:.3f}")
