"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line verdict (printed in the terminal summary) and
then asserts it, so a failing criterion also fails the run.
"""

import json
import math
import shutil
import time
from dataclasses import replace

import numpy as np
import pytest

from saliency_nas import ops
from saliency_nas.cli import main
from saliency_nas.cost import count_flops, count_params
from saliency_nas.data import gen_synthetic, manifest_split
from saliency_nas.losses import LossConfig, cc_loss, combined_loss, kld_loss, loss_components, nss_loss
from saliency_nas.metrics import eval_auc, eval_nss, eval_sim
from saliency_nas.network import build_network
from saliency_nas.search import Budget, FinetuneEvaluator, constrained_search
from saliency_nas.space import desk_space, sample_subnet, full_space
from saliency_nas.store import ParameterStore, SliceSpec, slice_weights
from saliency_nas.tensor import Tensor, backward, exp, log, no_grad, sqrt, where_mask
from saliency_nas.trainer import (ScheduleConfig, cosine_lr, inplace_gradients, sandwich_gradients,
                                  sandwich_roster, train_baseline, train_selfkd)

from _oracles import auc_pairwise, central_difference, directional_difference, rel_error

pytestmark = pytest.mark.slow


def _fd_check(fn, arrays):
    """Worst norm-wise relative error of analytic vs central-difference gradients."""
    leaves = [Tensor(np.array(a, np.float64), requires_grad=True) for a in arrays]
    backward(fn(*leaves))
    worst = 0.0
    for t in leaves:
        def f(t=t):
            with no_grad():
                return float(fn(*leaves).data)
        worst = max(worst, rel_error(t.grad, central_difference(f, t.data)))
    return worst


def _op_cases(rng):
    pos = lambda *s: rng.uniform(0.5, 2.0, size=s)
    nrm = lambda *s: rng.normal(size=s)
    fixed = {}

    def proj(shape):
        # one fixed projection per shape so repeated evaluations see the same function
        if shape not in fixed:
            fixed[shape] = rng.normal(size=shape)
        return fixed[shape]
    p4 = proj((2, 3, 3, 3))
    g = pos(2, 1, 3, 3)
    g /= g.sum(axis=(1, 2, 3), keepdims=True)
    f = np.zeros((2, 1, 3, 3))
    f[0, 0, 1, 1] = f[1, 0, 2, 0] = 1.0
    dist = pos(2, 1, 3, 3)
    rm, rv = np.zeros(2), np.ones(2)
    mask = rng.uniform(size=(3, 4)) > 0.5
    return {
        "add": (lambda a, b: ((a + b) * proj((3, 4))).sum(), [nrm(3, 4), nrm(1, 4)]),
        "sub": (lambda a, b: ((a - b) * proj((3, 4))).sum(), [nrm(3, 4), nrm(3, 1)]),
        "mul": (lambda a, b: ((a * b) * proj((3, 4))).sum(), [nrm(3, 4), nrm(4)]),
        "div": (lambda a, b: ((a / b) * proj((3, 4))).sum(), [nrm(3, 4), pos(3, 4)]),
        "power": (lambda a: ((a ** 1.5) * proj((3, 4))).sum(), [pos(3, 4)]),
        "exp": (lambda a: (exp(a) * proj((3, 4))).sum(), [nrm(3, 4)]),
        "log": (lambda a: (log(a) * proj((3, 4))).sum(), [pos(3, 4)]),
        "sqrt": (lambda a: (sqrt(a) * proj((3, 4))).sum(), [pos(3, 4)]),
        "mean/sum axes": (lambda a: (a.mean(axis=1) * proj((3,))).sum() + a.sum(axis=0, keepdims=True).sum(),
                          [nrm(3, 4)]),
        "reshape/getitem": (lambda a: (a.reshape(4, 3)[1:, ::2] * proj((3, 2))).sum(), [nrm(3, 4)]),
        "where_mask": (lambda a: (where_mask(mask, a, 0.5) * proj((3, 4))).sum(), [nrm(3, 4)]),
        "conv2d": (lambda x, w, b: (ops.conv2d(x, w, b, stride=1, padding=1) * proj((2, 3, 4, 3))).sum(),
                   [nrm(2, 2, 4, 3), nrm(3, 2, 3, 3), nrm(3)]),
        "conv2d stride 2": (lambda x, w: (ops.conv2d(x, w, stride=2, padding=2) * proj((2, 2, 3, 2))).sum(),
                            [nrm(2, 2, 5, 4), nrm(2, 2, 5, 5)]),
        "conv2d depthwise": (lambda x, w: (ops.conv2d(x, w, padding=1, groups=3) * p4).sum(),
                             [nrm(2, 3, 3, 3), nrm(3, 1, 3, 3)]),
        "bilinear_upsample": (lambda x: (ops.bilinear_upsample(x, 2, size=(5, 4)) * proj((1, 2, 5, 4))).sum(),
                              [nrm(1, 2, 3, 2)]),
        # inputs kept away from the kinks at 0 and +-3
        "relu": (lambda x: (ops.relu(x) * proj((6,))).sum(), [np.array([-2.0, -0.6, 0.3, 0.9, 1.7, 4.2])]),
        "hswish": (lambda x: (ops.hswish(x) * proj((6,))).sum(), [np.array([-4.1, -2.2, -0.7, 0.4, 1.9, 3.6])]),
        "sigmoid": (lambda x: (ops.sigmoid(x) * proj((3, 4))).sum(), [nrm(3, 4)]),
        "global_avg_pool": (lambda x: (ops.global_avg_pool(x) * proj((2, 3, 1, 1))).sum(), [nrm(2, 3, 3, 3)]),
        "batch_norm train": (lambda x, w, b: (ops.batch_norm(x, w, b, rm.copy(), rv.copy(), True)
                                              * proj((3, 2, 2, 2))).sum(), [nrm(3, 2, 2, 2), pos(2), nrm(2)]),
        "batch_norm eval": (lambda x, w, b: (ops.batch_norm(x, w, b, rm + 0.1, rv + 0.5, False)
                                             * proj((3, 2, 2, 2))).sum(), [nrm(3, 2, 2, 2), pos(2), nrm(2)]),
        "kld_loss": (lambda p: kld_loss(p, g), [dist / dist.sum(axis=(1, 2, 3), keepdims=True)]),
        "cc_loss": (lambda p: cc_loss(p, g), [dist]),
        "nss_loss": (lambda p: nss_loss(p, f), [dist]),
        "nss_loss all pixels": (lambda p: nss_loss(p, f, LossConfig(nss_fixated_only=False)), [dist]),
        "combined_loss": (lambda p: combined_loss(p, g, f), [dist]),
    }


def test_criterion_01_gradients(verdict):
    t0 = time.time()
    rng = np.random.default_rng(0)
    op_errors = {name: _fd_check(fn, arrs) for name, (fn, arrs) in _op_cases(rng).items()}

    # full min-config subnet: one random unit direction per parameter tensor plus the input.
    # Train-mode batch norm at 16x12 reduces the deepest stages to 1x1, so a batch of 8
    # keeps the per-channel statistics well conditioned; the small step keeps kink
    # crossings of relu/hswish rare.
    space = full_space()
    store = ParameterStore.from_space(space, 0, "high")
    cfg = replace(sample_subnet(space, "min"), resolution=(16, 12))
    net = build_network(cfg, store).train()
    ds = gen_synthetic(8, (16, 12), seed=0)
    xt = Tensor(ds.images.astype(np.float64), requires_grad=True)

    def loss_of(inp):
        return combined_loss(net.forward(inp), ds.densities, ds.fixations)

    store.zero_grad()
    backward(loss_of(xt))

    def f():
        with no_grad():
            return float(loss_of(xt).data)

    names, analytic, numeric = [], [], []
    for name, p in [("input", xt)] + [(k, v) for k, v in store.params.items() if v.grad is not None]:
        d = rng.normal(size=p.data.shape)
        d /= np.linalg.norm(d)
        names.append(name)
        analytic.append(float((p.grad * d).sum()))
        numeric.append(directional_difference(f, p.data, d, h=1e-7))
    a, n = np.array(analytic), np.array(numeric)
    net_err = rel_error(a, n)
    # some tensors have exactly zero gradient (a shift absorbed by the next batch norm);
    # 1e-7 absorbs the roundoff of a difference quotient at this step
    per_ok = np.abs(a - n) <= 1e-4 * np.maximum(np.abs(a), np.abs(n)) + 1e-7
    elapsed = time.time() - t0
    worst_op = max(op_errors, key=op_errors.get)
    ok = max(op_errors.values()) < 1e-4 and net_err < 1e-4 and per_ok.all() and elapsed < 120
    verdict(1, ok, f"{len(op_errors)} ops worst {op_errors[worst_op]:.1e} ({worst_op}); network "
                   f"{len(names)} tensors rel err {net_err:.1e}, per-tensor failures "
                   f"{[m for m, g in zip(names, per_ok) if not g] or 'none'}; {elapsed:.1f}s")
    assert ok


def test_criterion_02_slicing(verdict):
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        cout, cin, kmax = int(rng.integers(1, 9)), int(rng.integers(1, 7)), int(rng.choice([3, 5, 7]))
        entry = Tensor(rng.normal(size=(cout, cin, kmax, kmax)))
        spec = SliceSpec(int(rng.integers(1, cout + 1)), int(rng.integers(1, cin + 1)),
                         int(rng.choice([k for k in (1, 3, 5, 7) if k <= kmax])))
        off = (kmax - spec.k) // 2
        manual = entry.data[: spec.c_out, : spec.c_in, off : off + spec.k, off : off + spec.k].copy()
        x = Tensor(rng.normal(size=(2, spec.c_in, 7, 6)))
        stride = int(rng.integers(1, 3))
        a = ops.conv2d(x, slice_weights(entry, spec), stride=stride, padding=spec.k // 2).data
        b = ops.conv2d(x, Tensor(manual), stride=stride, padding=spec.k // 2).data
        worst = max(worst, float(np.abs(a - b).max()))
    elapsed = time.time() - t0
    ok = worst <= 1e-12 and elapsed < 60
    verdict(2, ok, f"200 slice specs, max |view - copy| = {worst:.1e}; {elapsed:.1f}s")
    assert ok


def test_criterion_03_aliasing(verdict):
    space = desk_space()
    store = ParameterStore.from_space(space, 2, "high")
    ds = gen_synthetic(4, (32, 24), seed=2)
    small = sample_subnet(space, "min")
    mx = build_network(sample_subnet(space, "max"), store).eval()
    modules = ["first_conv"] + [b.name for b in space.mbconv] + ["last_conv", "decoder", "head"]
    failed = []
    for module in modules:
        with no_grad():
            before = mx.forward(ds.images).data.copy()
        saved = {k: v.data.copy() for k, v in store.params.items()}
        net = build_network(small, store).train()
        store.zero_grad()
        backward(combined_loss(net.forward(ds.images), ds.densities, ds.fixations))
        touched = [k for k, v in store.params.items() if k.startswith(module + ".") and v.grad is not None]
        for k in touched:
            store[k].data -= 0.5 * store[k].grad
        store.zero_grad()
        mutated = any(not np.array_equal(store[k].data, saved[k]) for k in touched)
        with no_grad():
            after = mx.forward(ds.images).data
        if not (touched and mutated and not np.array_equal(before, after)):
            failed.append(module)
        store.load_arrays(saved)
    ok = not failed
    verdict(3, ok, f"{len(modules)} module probes, failing: {failed or 'none'}")
    assert ok


def test_criterion_04_loss_identities(verdict):
    rng = np.random.default_rng(4)
    g = rng.uniform(0.05, 1, size=(6, 6))
    g /= g.sum()
    checks = {
        "cc(G,G)": abs(float(cc_loss(g, g).data)) <= 1e-10,
        "cc(aG+b,G)": all(abs(float(cc_loss(a * g + b, g).data)) <= 1e-10
                          for a, b in [(0.3, 0.0), (2.0, -1.0), (17.0, 5.0)]),
        "kld(G,G)": float(kld_loss(g, g).data) <= 1e-6,
        "nss at z=0": abs(float(nss_loss(np.array([[0.0, 1.0, 2.0]]), np.array([[0.0, 1.0, 0.0]])).data)
                          - 0.5) <= 1e-10,
    }
    f = (rng.uniform(size=(6, 6)) > 0.7).astype(float)
    f[0, 0] = 1.0
    p = rng.uniform(0.05, 1, size=(6, 6))
    comps = loss_components(p, g, f)
    checks["combined exact sum"] = float(combined_loss(p, g, f).data) == comps["kld"] + comps["cc"] + comps["nss"]
    ok = all(checks.values())
    verdict(4, ok, ", ".join(f"{k} {'ok' if v else 'FAIL'}" for k, v in checks.items()))
    assert ok


def test_criterion_05_metric_oracles(verdict):
    rng = np.random.default_rng(5)
    worst = 0.0
    for i in range(100):
        p = rng.uniform(size=(6, 6)) if i % 2 else rng.integers(0, 4, size=(6, 6)).astype(float)
        f = (rng.uniform(size=(6, 6)) < 0.3).astype(float)
        f.flat[0], f.flat[-1] = 1.0, 0.0
        worst = max(worst, abs(eval_auc(p, f) - auc_pairwise(p, f)))
    nss = eval_nss(np.array([0.0, 0.0, 0.0, 1.0]), np.array([0, 0, 0, 1]))
    sim = eval_sim(np.array([1.0, 0.0]), np.array([0.5, 0.5]))
    ok = worst <= 1e-10 and abs(nss - math.sqrt(3)) <= 1e-12 and sim == 0.5
    verdict(5, ok, f"AUC vs pairwise worst {worst:.1e} over 100 cases; NSS {nss:.6f}; SIM {sim}")
    assert ok


def test_criterion_06_scheduler(verdict):
    cfg = ScheduleConfig(lr_max=0.1, lr_min=0.001, T0=10)
    mid = cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min)  # cos(pi / 2) = 0 term vanishes
    got = [cosine_lr(t, cfg) for t in (0, 5, 10, 15)]
    expected = [cfg.lr_max, cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi / 2)),
                cfg.lr_max, cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1 + math.cos(math.pi / 2))]
    ok = got == expected and abs(got[1] - mid) < 1e-17
    verdict(6, ok, f"lr at t=0,T0/2,T0,3T0/2: {got}")
    assert ok


def _desk_task(seed):
    return manifest_split(gen_synthetic(256, (32, 24), seed=seed))


SCHED = ScheduleConfig(lr_max=0.1, lr_min=0.0, T0=10, epochs=20, momentum=0.9, batch_size=16, alpha=0.5)


def test_criterion_07_selfkd_contract(verdict):
    t0 = time.time()
    space = desk_space()
    train, val = _desk_task(0)
    store = ParameterStore.from_space(space, 0, "high")
    res = train_selfkd(sample_subnet(space, "min"), store, train, val, SCHED, seed=0, keep_snapshots=True)
    log = res.log
    a = log[0]["teacher_forwards"] == 0
    best, b = math.inf, True
    for rec in log:
        b &= rec["teacher_accepted"] == (rec["val_loss"] < best)
        best = min(best, rec["val_loss"])
    b &= res.state.accepted_count == sum(r["teacher_accepted"] for r in log) == len(res.state.snapshots)
    dev = max(float(np.abs(p.data - np.mean([s[k] for s in res.state.snapshots], axis=0)).max())
              for k, p in res.state.teacher.params.items())
    c = dev <= 1e-10
    elapsed = time.time() - t0
    ok = a and b and c and elapsed < 600
    accepted = [r["epoch"] for r in log if r["teacher_accepted"]]
    verdict(7, ok, f"(a) {a} (b) {b} accepted at epochs {accepted} (c) teacher vs snapshot mean "
                   f"{dev:.1e}; {elapsed:.1f}s")
    assert ok


def test_criterion_08_selfkd_benefit(verdict):
    t0 = time.time()
    space = desk_space()
    cfg = sample_subnet(space, "min")
    base, kd = [], []
    for seed in range(5):
        train, val = _desk_task(seed)
        base.append(train_baseline(cfg, ParameterStore.from_space(space, seed), train, val, SCHED,
                                   seed=seed).log[-1]["val_cc"])
        kd.append(train_selfkd(cfg, ParameterStore.from_space(space, seed), train, val, SCHED,
                               seed=seed).log[-1]["val_cc"])
    wins = sum(k > b for k, b in zip(kd, base))
    elapsed = time.time() - t0
    ok = np.mean(kd) >= np.mean(base) - 0.005 and elapsed < 3600
    verdict(8, ok, f"mean val CC self-kd {np.mean(kd):.4f} vs baseline {np.mean(base):.4f}; "
                   f"strict wins {wins}/5 (reported only); {elapsed:.1f}s")
    assert ok


def test_criterion_09_cost_anchors(verdict):
    sp = full_space()
    lo, hi = sample_subnet(sp, "min"), sample_subnet(sp, "max")
    pl, fl = count_params(lo, "encoder"), count_flops(lo, scope="encoder")
    ph, fh = count_params(hi, "encoder"), count_flops(hi, scope="encoder")
    soft = (abs(pl / 4.97e6 - 1) <= 0.15 and abs(fl / 0.51e9 - 1) <= 0.25
            and abs(ph / 19.38e6 - 1) <= 0.15 and abs(fh / 4.18e9 - 1) <= 0.25)
    exact = True
    rng = np.random.default_rng(9)
    for space in (sp, desk_space()):
        store = ParameterStore.from_space(space, 0)
        for c in [sample_subnet(space, "min"), sample_subnet(space, "max")] + \
                 [sample_subnet(space, "random", rng) for _ in range(10)]:
            exact &= build_network(c, store).weight_elements() == count_params(c, "full", space)
    ok = soft and exact
    verdict(9, ok, f"min enc {pl / 1e6:.2f}M {fl / 1e9:.3f}G, max enc {ph / 1e6:.2f}M {fh / 1e9:.3f}G; "
                   f"builder == cost model: {exact}")
    assert ok


def test_criterion_10_sandwich_inplace(verdict):
    space = desk_space()
    ds = gen_synthetic(4, (32, 24), seed=10)
    x, g, f = ds.images, ds.densities, ds.fixations
    store = ParameterStore.from_space(space, 10, "high")
    roster = sandwich_roster(space, np.random.default_rng(10), (32, 24))
    store.zero_grad()
    sandwich_gradients(store, roster, x, g, f)
    agg = store.grads()
    total = {k: np.zeros_like(v) for k, v in agg.items()}
    for c in roster:
        store.zero_grad()
        sandwich_gradients(store, [c], x, g, f)
        for k, v in store.grads().items():
            total[k] += v
    sw = max(float(np.abs(agg[k] - total[k]).max()) for k in agg)

    mx = roster[1]
    store.zero_grad()
    inplace_gradients(store, mx, [], x, g, f)
    alone = store.grads()
    isolated = True
    for others in ([roster[0]], roster[2:], [roster[0]] + roster[2:]):
        store.zero_grad()
        probe = {}
        inplace_gradients(store, mx, others, x, g, f, probe=probe)
        isolated &= all(np.array_equal(probe["max_grads"][k], alone[k]) for k in alone)
    store.zero_grad()
    ok = sw <= 1e-10 and isolated
    verdict(10, ok, f"sandwich aggregate vs sum max |diff| {sw:.1e}; inplace max-grad isolated: {isolated}")
    assert ok


def _snapshot(root):
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_criterion_11_determinism(verdict, tmp_path):
    data = tmp_path / "data"
    runs = {
        "gen-data": ["gen-data", "--n", "24", "--res", "32x24", "--seed", "3", "--out", str(data)],
        "train self-kd": ["train", "--data", str(data), "--strategy", "self-kd", "--epochs", "3", "--t0", "2",
                          "--batch-size", "8", "--seed", "3", "--out", "run_kd"],
        "train sandwich": ["train", "--data", str(data), "--strategy", "sandwich", "--epochs", "1",
                           "--batch-size", "8", "--seed", "3", "--out", "run_sw"],
        "eval": ["eval", "--data", str(data), "--arch", "run_kd/arch.json", "--checkpoint",
                 "run_kd/checkpoint.bin", "--out", "eval/report.json"],
        "search": ["search", "--data", str(data), "--trials", "6", "--finetune-steps", "1", "--batch-size", "8",
                   "--method", "evolution", "--seed", "3", "--out", "search"],
        "sample": ["sample", "--n", "300", "--seed", "3", "--out", "pop.csv"],
        "export-arch": ["export-arch", "--mode", "random", "--seed", "3", "--out", "arch.json"],
    }
    mismatched = []
    outputs = {}
    import os
    cwd = os.getcwd()
    try:
        for attempt in range(2):
            work = tmp_path / f"work{attempt}"
            work.mkdir()
            os.chdir(work)
            if data.exists():
                shutil.rmtree(data)
            for name, argv in runs.items():
                assert main(argv) == 0, name
            outputs[attempt] = {"data": _snapshot(data), "work": _snapshot(work)}
    finally:
        os.chdir(cwd)
    for part in ("data", "work"):
        a, b = outputs[0][part], outputs[1][part]
        if a.keys() != b.keys():
            mismatched.append(f"{part}: file sets differ")
        mismatched += [f"{part}/{k}" for k in a if k in b and a[k] != b[k]]
    n_files = len(outputs[0]["data"]) + len(outputs[0]["work"])
    ok = not mismatched
    verdict(11, ok, f"{len(runs)} commands, {n_files} files compared, mismatches: {mismatched or 'none'}")
    assert ok


def test_criterion_12_search_contract(verdict):
    t0 = time.time()
    details, ok = [], True
    sp = full_space()
    lo, hi = count_flops(sample_subnet(sp, "min")), count_flops(sample_subnet(sp, "max"))
    budget = Budget(max_flops=(lo + hi) / 2)
    for method in ("random", "evolution"):
        res = constrained_search(sp, budget, lambda c: float(count_params(c)), n_trials=200, seed=12,
                                 method=method)
        good = res.best.flops <= budget.max_flops and all(c.flops <= budget.max_flops for c in res.trace)
        ok &= good and len(res.trace) == 200
        details.append(f"full/{method} best {res.best.flops / 1e9:.2f}G <= {budget.max_flops / 1e9:.2f}G "
                       f"({res.rejected} rejected)")

    space = desk_space()
    lo, hi = count_flops(sample_subnet(space, "min"), space=space), count_flops(sample_subnet(space, "max"),
                                                                               space=space)
    budget = Budget(max_flops=(lo + hi) / 2)
    train, val = manifest_split(gen_synthetic(24, (32, 24), seed=12))
    ev = FinetuneEvaluator(ParameterStore.from_space(space, 12), train, val, steps=1, batch_size=8, seed=12)
    res = constrained_search(space, budget, ev, n_trials=200, seed=12, method="evolution")
    good = res.best.flops <= budget.max_flops and all(c.flops <= budget.max_flops for c in res.trace)
    ok &= good and len(res.trace) == 200
    details.append(f"desk/finetune best CC {res.best.score:.3f} at {res.best.flops} <= {budget.max_flops:.0f}")
    verdict(12, ok, "; ".join(details) + f"; {time.time() - t0:.1f}s")
    assert ok
