"""Quick runtime checks behind ``cderail selftest``."""

from __future__ import annotations

import numpy as np

from cderail.continual import Consolidation, ewc_penalty
from cderail.neuralnet import PAU, backward, forward, mlp_init, pau_backward, pau_forward
from cderail.railsim import Family, StageSpec, Status, detect_deadlocks, reset, step


def _central_diff(f, x, h=1e-6):
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


def _rel_err(a, b):
    return float(np.max(np.abs(a - b)) / max(1e-8, np.max(np.abs(a)), np.max(np.abs(b))))


def check_pau_gradients(trials: int = 20, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        a, b = rng.normal(size=6), rng.normal(size=4)
        x, dy = rng.normal(size=7), rng.normal(size=7)
        dx, da, db = pau_backward(a, b, x, dy)
        for arr, g in ((a, da), (b, db)):
            worst = max(worst, _rel_err(g, _central_diff(lambda: float(pau_forward(a, b, x) @ dy), arr)))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_network_gradients(trials: int = 5, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for k in range(trials):
        net = mlp_init(3, (4, 3), 2, activation=PAU, seed=k)
        for act in net.activations:
            act.a += rng.normal(0, 0.1, act.a.shape)
            act.b += rng.normal(0, 0.1, act.b.shape)
        x, dq = rng.normal(size=(5, 3)), rng.normal(size=(5, 2))
        _, cache = forward(net, x)
        grads = backward(net, cache, dq)
        for p, g in zip(net.params(), grads):
            worst = max(worst, _rel_err(g, _central_diff(lambda: float(np.sum(forward(net, x)[0] * dq)), p)))
    return worst < 1e-4, f"max relative error {worst:.2e}"


def check_ewc_quadratic(trials: int = 20, seed: int = 0, lam: float = 0.5) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    net = mlp_init(3, (4,), 2, seed=seed)
    worst = 0.0
    for _ in range(trials):
        star = [p.copy() for p in net.params()]
        fisher = [rng.random(p.shape) for p in star]
        cons = [Consolidation(star, fisher)]
        j = int(rng.integers(len(star)))
        idx = tuple(int(rng.integers(s)) for s in star[j].shape)
        delta = float(rng.normal())
        net.params()[j][idx] += delta
        pen, _ = ewc_penalty(net, cons, lam)
        net.params()[j][idx] -= delta
        want = 0.5 * lam * fisher[j][idx] * delta**2
        worst = max(worst, abs(pen - want) / max(abs(want), 1e-300))
    return worst < 1e-10, f"max relative error {worst:.2e}"


def check_deadlock_scenarios() -> tuple[bool, str]:
    from cderail.harness.scenarios import chain_behind_head_on, four_cycle, head_on, unblockable

    results = []
    for build in (head_on, four_cycle, chain_behind_head_on):
        st = build()
        flagged = detect_deadlocks(st) == {t.id for t in st.trains}
        results.append(flagged and unblockable(st, 2))
    return all(results), f"{sum(results)}/{len(results)} scenarios flagged and unblockable"


def check_cell_exclusion(steps: int = 2000, seed: int = 0) -> tuple[bool, str]:
    rng = np.random.default_rng(seed)
    spec = StageSpec(Family.DEADLOCK, 12, 3, 6, (25, 25, 25, 25), 1 / 20, 1, 2)
    st = reset(spec, seed)
    for _ in range(steps):
        st, _, done = step(st, {t.id: int(rng.integers(5)) for t in st.trains}, inplace=True)
        cells = [t.position for t in st.trains if t.status is Status.ACTIVE]
        if len(cells) != len(set(cells)):
            return False, f"two trains share a cell at tick {st.tick}"
        if done:
            st = reset(spec, int(rng.integers(1 << 30)))
    return True, f"{steps} fuzzed ticks without a shared cell"


CHECKS = {
    "pau gradients": check_pau_gradients,
    "network gradients": check_network_gradients,
    "ewc quadratic law": check_ewc_quadratic,
    "deadlock scenarios": check_deadlock_scenarios,
    "cell exclusion": check_cell_exclusion,
}


def run_selftest():
    for name, check in CHECKS.items():
        ok, detail = check()
        yield name, ok, detail
