"""End-to-end acceptance checks; each test prints one PASS/FAIL line."""

import csv
import time

import numpy as np
import pytest

from stalemp import autodiff as ad
from stalemp import cli
from stalemp.autodiff import grad_check
from stalemp.diagnostics import full_batch_forward, measure_staleness, plain_gat_forward
from stalemp.graph import batch_from_nodes, random_graph, synth_sbm
from stalemp.history import HistoryStore
from stalemp.layer import (AugmentMode, all_parameters, attention_in, attention_out,
                           forward_batch, init_params)
from stalemp.training import (Adam, SnapshotStore, Trainer, TrainConfig, staleness_loss,
                              total_loss)


@pytest.fixture
def verdict(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\n[criterion {number}] {'PASS' if ok else 'FAIL'}: {title}"
                  + (f" ({detail})" if detail else ""))
        assert ok, detail
    return emit


def default_run(**overrides):
    cfg = cli.resolve_config(None, overrides)
    g, x, y = cli.load_dataset(cfg)
    return Trainer(g, x, y, cli.train_config(cfg))


def loss_criteria(tr):
    """Accuracy, moving-average and step-size checks shared by criteria 7 and 10."""
    hist = tr.fit()
    best_train = max(r["train_acc"] for r in hist)
    loss = np.array([r["total_loss"] for r in hist])
    ma = np.convolve(loss, np.ones(10) / 10, mode="valid")
    upticks = int(np.sum(np.diff(ma) > 0))
    conv = tr.convergence()
    checks = {"train_acc": best_train >= 0.95, "ma_nonincreasing": upticks == 0,
              "eta_below_2_over_L": conv.eta_ok}
    detail = (f"best train acc {best_train:.3f}, {upticks} moving-average upticks, "
              f"eta={conv.eta:g} vs 2/L={2 / conv.smoothness:.3g}")
    return checks, detail


def test_gradient_correctness(verdict):
    start, worst, cases = time.perf_counter(), 0.0, 0
    for seed in range(12):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(6, 13))
        g = random_graph(n, 3 * n, seed=seed)
        x = rng.standard_normal((n, 3))
        y = rng.integers(0, 2, n)
        for mode in (AugmentMode.CONCAT, AugmentMode.SUM):
            params = init_params([3, 3, 2], mode, seed=seed)
            store = HistoryStore(x, [3, 3])
            store.embeddings[1] = rng.standard_normal((n, 3))
            store.grad_norm[1] = rng.uniform(0.2, 2.0, n)
            snaps = SnapshotStore(n, 2)
            snaps.update(np.arange(n), rng.standard_normal((n, 2)), 1)
            ctx = batch_from_nodes(g, rng.choice(n, n // 2, replace=False))

            def f():
                out = forward_batch(g, ctx, store, params, 2, mode, use_gamma=True)
                task = ad.cross_entropy(out.final, y[ctx.nodes])
                return total_loss(task, staleness_loss(out.final, ctx.nodes, snaps, 2), 0.5)

            rep = grad_check(f, all_parameters(params))
            worst = max(worst, rep.max_rel_error)
            cases += 1
    elapsed = time.perf_counter() - start
    verdict(1, "parameter gradients match central differences", worst <= 1e-5 and elapsed < 60,
            f"{cases} graph/mode cases, max rel error {worst:.2e}, {elapsed:.1f}s")


def test_full_batch_equivalence(verdict):
    start = time.perf_counter()
    g, x, y = synth_sbm(40, 2, 0.3, 0.05, 6, seed=0)
    rng = np.random.default_rng(0)
    identical = True
    for mode in AugmentMode:
        params = init_params([6, 5, 4, 2], mode, seed=1)
        store = HistoryStore(x, [6, 5, 4])
        for l in (1, 2):
            store.embeddings[l] = rng.standard_normal(store.embeddings[l].shape)
            store.grad_norm[l] = rng.uniform(0, 2, 40)
        out = forward_batch(g, batch_from_nodes(g, np.arange(40)), store, params, 3, mode)
        exact = full_batch_forward(g, x, params, 3)
        identical &= bool(np.array_equal(out.final.value, exact[-1]))
        identical &= all(np.array_equal(h.value, exact[l]) for l, h in enumerate(out.hiddens, 1))

    cfg = TrainConfig(lam=0.0, use_gamma=False, augment="none", num_clusters=1, batch_clusters=1,
                      shuffle=False, epochs=50, seed=0)
    tr = Trainer(g, x, y, cfg)
    tr.fit()
    ref = Trainer(g, x, y, cfg)
    opt = Adam(all_parameters(ref.params), cfg.lr)
    ref_losses = []
    for _ in range(50):
        loss = ad.cross_entropy(plain_gat_forward(g, x, ref.params, cfg.dropout, ref.dropout_rng),
                                y, ref.train_mask)
        ad.backward(loss)
        opt.step()
        ref_losses.append(loss.item())
    same = [r.task_loss for r in tr.steps] == ref_losses
    elapsed = time.perf_counter() - start
    verdict(2, "whole-graph batch equals the exact model", identical and same and elapsed < 60,
            f"bit-identical forward {identical}, 50-step trajectory equal {same}, {elapsed:.1f}s")


def test_degeneracy_at_zero_staleness(verdict):
    rng = np.random.default_rng(3)
    exact = 0
    for _ in range(200):
        k, f_in = int(rng.integers(1, 9)), int(rng.integers(2, 6))
        p = init_params([f_in, 3], "none", seed=int(rng.integers(1 << 30)))[0]
        h, rows = rng.standard_normal((1, f_in)), rng.standard_normal((k, f_in))
        a_out = attention_out(h, rows, np.zeros(k), rng.uniform(0, 20, k), rng.uniform(0, 10),
                              int(rng.integers(1, 100)), p)
        exact += bool(np.array_equal(a_out, attention_in(h, rows, p)))
    verdict(3, "zero staleness reduces to plain attention", exact == 200, f"{exact}/200 exact")


def test_attention_properties(verdict):
    rng = np.random.default_rng(4)
    worst_sum, stale_bad, cen_bad = 0.0, 0, 0
    for _ in range(1000):
        k, f_in = int(rng.integers(2, 10)), int(rng.integers(2, 6))
        p = init_params([f_in, 3], "none", seed=int(rng.integers(1 << 30)))[0]
        h, rows = rng.standard_normal((1, f_in)), rng.standard_normal((k, f_in))
        s, c = rng.uniform(0.05, 3, k), rng.uniform(0, 8, k)
        c_avg, t = rng.uniform(0, 8), int(rng.integers(1, 50))
        base = attention_out(h, rows, s, c, c_avg, t, p)
        worst_sum = max(worst_sum, abs(base.sum() - 1.0))
        j, bump = int(rng.integers(k)), rng.uniform(1e-3, 5)
        s2, c2 = s.copy(), c.copy()
        s2[j] += bump
        c2[j] += bump
        stale_bad += attention_out(h, rows, s2, c, c_avg, t, p)[j] > base[j]
        cen_bad += attention_out(h, rows, s, c2, c_avg, t, p)[j] > base[j]
    ok = worst_sum <= 1e-12 and stale_bad == 0 and cen_bad == 0
    verdict(4, "simplex and monotonicity on 1000 segments", ok,
            f"max |sum-1| {worst_sum:.1e}, staleness breaks {stale_bad}, centrality breaks {cen_bad}")


def test_bound_over_training_snapshots(verdict):
    start = time.perf_counter()
    snapshots, violations, checked, ratios = 0, 0, 0, []
    for n in (30, 60, 100, 200):
        g, x, y = synth_sbm(n, 2, 0.3, 0.05, 8, seed=n)
        tr = Trainer(g, x, y, TrainConfig(epochs=30, seed=n))
        for _ in range(5):
            tr.fit(6)
            rep = tr.diagnose()
            snapshots += 1
            violations += rep.violations
            checked += n
            bad = rep.final_error > rep.bound + 1e-10
            if bad.any():
                ratios.append(float(np.max(rep.final_error[bad] / np.maximum(rep.bound[bad], 1e-300))))
    elapsed = time.perf_counter() - start
    detail = (f"{snapshots} snapshots, {violations}/{checked} node checks violated"
              + (f", worst error/bound {max(ratios):.2f}" if ratios else "") + f", {elapsed:.1f}s")
    verdict(5, "cache error bound holds at every node", violations == 0 and elapsed < 300, detail)


def _consumed_staleness(tr, epochs):
    """Mean true staleness of the layer-1 cache rows read by each step."""
    vals = []
    for _ in range(epochs):
        tr.epoch += 1
        for ctx in tr.schedule():
            if ctx.frontier.size:
                s = measure_staleness(tr.store, tr.exact_embeddings())[1]
                vals.append(float(s[ctx.frontier].mean()))
            else:
                vals.append(0.0)
            tr.train_step(ctx, tr.epoch)
    return float(np.mean(vals))


def test_staleness_dynamics(verdict):
    persistence_ok, notes = True, []
    for k in (3, 4, 6):
        g, x, y = synth_sbm(120, 2, 0.3, 0.05, 8, seed=k)
        tr = Trainer(g, x, y, TrainConfig(num_clusters=k, batch_clusters=1, shuffle=False, seed=k))
        tr.fit(3)
        observed = tr.history[-1]["max_persistence"]
        persistence_ok &= observed == k - 1
        notes.append(f"k={k}:{observed}")
    gap_ok = True
    for seed in range(5):
        g, x, y = synth_sbm(80, 2, 0.3, 0.05, 8, seed=seed)
        full = Trainer(g, x, y, TrainConfig(num_clusters=4, batch_clusters=4, seed=seed))
        half = Trainer(g, x, y, TrainConfig(num_clusters=4, batch_clusters=2, seed=seed))
        s_full, s_half = _consumed_staleness(full, 3), _consumed_staleness(half, 3)
        gap_ok &= s_full == 0.0 and s_half > s_full
        notes.append(f"seed {seed}: {s_half:.3g} vs {s_full:g}")
    verdict(6, "persistence reaches k-1 and batching makes the cache stale",
            persistence_ok and gap_ok, "; ".join(notes))


def test_convergence_default_config(verdict):
    start = time.perf_counter()
    checks, detail = loss_criteria(default_run())
    elapsed = time.perf_counter() - start
    verdict(7, "default run converges on the two-block graph",
            all(checks.values()) and elapsed < 120, f"{detail}, {elapsed:.1f}s")


def test_sweep_grid(verdict, tmp_path, monkeypatch):
    monkeypatch.setenv("STALEMP_THREADS", "1")
    codes = [cli.main(["sweep", "--epochs", "2", "--out", str(tmp_path / name)]) for name in "ab"]
    with open(tmp_path / "a" / "sweep.csv") as fh:
        rows = list(csv.DictReader(fh))
    cells = {(r["component"], float(r["lambda"]), int(r["batch_clusters"])) for r in rows}
    expected = {(c, l, b) for c in cli.SWEEP_COMPONENTS for l in (0.1, 0.3, 0.5, 0.8)
                for b in (5, 10, 20)}
    complete = cells == expected and len(rows) == len(expected)
    filled = all(r["status"] == "ok" and r["final_train_acc"] != "" for r in rows)
    dirs = all((tmp_path / "a" / f"{c}_lam{l:g}_bc{b}" / "metrics.jsonl").exists() for c, l, b in cells)
    same = (tmp_path / "a" / "sweep.csv").read_bytes() == (tmp_path / "b" / "sweep.csv").read_bytes()
    verdict(8, "ablation sweep covers the grid deterministically",
            codes == [0, 0] and complete and filled and dirs and same,
            f"{len(rows)} cells of {len(expected)}, deterministic {same}")


def test_forward_cost_is_linear_in_edges(verdict):
    sizes, times = (1_000, 10_000, 100_000), []
    for m in sizes:
        n = m // 10
        g = random_graph(n, m, seed=0)
        x = np.random.default_rng(0).standard_normal((n, 32))
        params = init_params([32, 32, 32], "sum", seed=0)
        store = HistoryStore(x, [32, 32])
        store.embeddings[1] = np.random.default_rng(1).standard_normal((n, 32))
        ctx = batch_from_nodes(g, np.arange(n // 2))
        reps = []
        for _ in range(max(3, 300_000 // m)):
            t0 = time.perf_counter()
            forward_batch(g, ctx, store, params, 1, "sum")
            reps.append(time.perf_counter() - t0)
        times.append(min(reps))
    slope = float(np.polyfit(np.log(sizes), np.log(times), 1)[0])
    verdict(9, "forward time scales linearly with edge count", abs(slope - 1.0) <= 0.2,
            f"log-log slope {slope:.3f}, times " + ", ".join(f"{t * 1e3:.2f}ms" for t in times))


def test_eviction_semantics(verdict):
    tr = default_run(g_thres=1)
    checks, detail = loss_criteria(tr)
    shrunk = sum(r.retained < r.frontier for r in tr.steps)
    worst = 0.0
    for ctx in tr.schedule():
        out = forward_batch(tr.graph, ctx, tr.store, tr.params, tr.epoch, tr.mode)
        coeff = out.attention[-1]
        sums = ad.segment_sum_np(coeff.alpha_out[:, None], coeff.out_ptr)[:, 0]
        live = np.diff(coeff.out_ptr) > 0
        worst = max(worst, float(np.max(np.abs(sums[live] - 1.0), initial=0.0)))
    checks.update(frontier_shrinks=shrunk > 0, simplex=worst <= 1e-12)
    failed = [k for k, v in checks.items() if not v]
    verdict(10, "eviction shrinks the frontier and keeps training sound", not failed,
            f"{shrunk} shrunken steps, max |sum-1| {worst:.1e}, {detail}"
            + (f", failing: {', '.join(failed)}" if failed else ""))
