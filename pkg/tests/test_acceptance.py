"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

The desk-scale runs share a module-level base model; the whole file takes
about half an hour on one core. Select it alone with
``pytest tests/test_acceptance.py``; the lines are printed in the terminal
summary.
"""
import csv
import hashlib
import io
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest

from quantmark import cli, pipeline
from quantmark import tensor as T
from quantmark.config import ExperimentConfig, trigger_config
from quantmark.quant import codes_with_scale, compute_intervals, dequantize, quantize, quantized_equal
from quantmark.tensor import Tensor

import gradcheck as G
from conftest import ACCEPTANCE

BUDGET_STEPS = 5000
BUDGET_SECONDS = 600.0
PROBE_EVERY = 500
ERASE_STEPS = 2000


@contextmanager
def criterion(num: int, title: str, facts: dict):
    """Record ``PASS``/``FAIL`` for a criterion; ``facts`` is filled in by the body."""
    try:
        yield
    except BaseException as e:
        detail = ", ".join(f"{k}={v}" for k, v in facts.items())
        first = str(e).splitlines()[0] if str(e) else ""
        ACCEPTANCE.append(f"FAIL criterion {num:2d} {title}: {detail} [{type(e).__name__}: {first}]")
        raise
    detail = ", ".join(f"{k}={v}" for k, v in facts.items())
    ACCEPTANCE.append(f"PASS criterion {num:2d} {title}: {detail}")


def fmt(x):
    return f"{x:.3f}" if isinstance(x, float) else x


# 1. quantization roundtrip ---------------------------------------------------

def test_c01_quantization_roundtrip():
    facts = {}
    with criterion(1, "quantization roundtrip", facts):
        rng = np.random.default_rng(0)
        t0 = time.perf_counter()
        bad = 0
        for _ in range(1000):
            r, c = rng.integers(1, 65, size=2)
            w = rng.uniform(-10, 10, size=(r, c)).astype(np.float32)
            q = quantize(w)
            q2 = quantize(dequantize(q))
            ok = quantized_equal(q, q2) and np.array_equal(q.scales, np.abs(w).max(axis=1))
            bad += not ok
        dt = time.perf_counter() - t0
        facts.update(matrices=1000, mismatches=bad, seconds=fmt(dt))
        assert bad == 0
        assert dt < 5.0


# 2. interval safety ------------------------------------------------------------

def test_c02_interval_safety():
    facts = {}
    with criterion(2, "interval safety", facts):
        rng = np.random.default_rng(1)
        t0 = time.perf_counter()
        violations = 0
        total = 0
        for _ in range(100):
            r, c = rng.integers(1, 9, size=2)
            w = rng.uniform(-10, 10, size=(r, c)).astype(np.float32)
            q = quantize(w)
            b = compute_intervals(w, 0.4)
            u = rng.random((10_000, r, c))
            s = (b.low + u * (b.high.astype(np.float64) - b.low)).astype(np.float32)
            s[0], s[1] = b.low, b.high  # include both endpoints
            codes = codes_with_scale(s.reshape(-1, c), np.tile(q.scales, 10_000)).reshape(s.shape)
            violations += int(np.count_nonzero(codes != q.values[None]))
            total += s.size
        dt = time.perf_counter() - t0
        facts.update(samples=10_000 * 100, elements=total, violations=violations, seconds=fmt(dt))
        assert violations == 0
        assert dt < 10.0


# 9. gradient correctness --------------------------------------------------------

def _ops():
    """(name, builder); a builder draws one random case and returns
    (inputs, tensor_fn, float64_fn), both returning the scalar sum(out * r)."""

    def add(rng):
        a, b = rng.standard_normal((3, 4)), rng.standard_normal((1, 4))
        r = rng.standard_normal((3, 4))
        return [a, b], lambda x, y: T.sum(T.add(x, y) * Tensor(r)), lambda x, y: ((x + y) * r).sum()

    def mul(rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((3, 1))
        r = rng.standard_normal((2, 3, 4))
        return [a, b], lambda x, y: T.sum(T.mul(x, y) * Tensor(r)), lambda x, y: (x * y * r).sum()

    def matmul(rng):
        a, b = rng.standard_normal((2, 3, 4)), rng.standard_normal((4, 5))
        r = rng.standard_normal((2, 3, 5))
        return [a, b], lambda x, y: T.sum(T.matmul(x, y) * Tensor(r)), lambda x, y: ((x @ y) * r).sum()

    def transpose(rng):
        a = rng.standard_normal((2, 3, 4))
        r = rng.standard_normal((4, 2, 3))
        ax = (2, 0, 1)
        return [a], lambda x: T.sum(T.transpose(x, ax) * Tensor(r)), lambda x: (x.transpose(ax) * r).sum()

    def reshape(rng):
        a = rng.standard_normal((2, 6))
        r = rng.standard_normal((3, 4))
        return [a], lambda x: T.sum(T.reshape(x, (3, 4)) * Tensor(r)), lambda x: (x.reshape(3, 4) * r).sum()

    def sum_(rng):
        a = rng.standard_normal((3, 5))
        return [a], lambda x: T.sum(x * x), lambda x: (x * x).sum()

    def mean(rng):
        a = rng.standard_normal((4, 3))
        return [a], lambda x: T.mean(x * x), lambda x: (x * x).mean()

    def embedding(rng):
        w = rng.standard_normal((6, 3))
        ids = rng.integers(0, 6, size=(2, 4))
        r = rng.standard_normal((2, 4, 3))
        return [w], lambda x: T.sum(T.embedding(x, ids) * Tensor(r)), lambda x: (x[ids] * r).sum()

    def layer_norm(rng):
        x, g, b = rng.standard_normal((3, 5)), rng.standard_normal(5), rng.standard_normal(5)
        r = rng.standard_normal((3, 5))
        return ([x, g, b], lambda x, g, b: T.sum(T.layer_norm(x, g, b) * Tensor(r)),
                lambda x, g, b: (G.ref_layer_norm(x, g, b) * r).sum())

    def gelu(rng):
        x = rng.standard_normal((3, 4)) * 2
        r = rng.standard_normal((3, 4))
        return [x], lambda x: T.sum(T.gelu(x) * Tensor(r)), lambda x: (G.ref_gelu(x) * r).sum()

    def causal_softmax(rng):
        s = rng.standard_normal((2, 4, 4))
        r = rng.standard_normal((2, 4, 4))
        return ([s], lambda x: T.sum(T.causal_softmax(x) * Tensor(r)),
                lambda x: (G.ref_causal_softmax(x) * r).sum())

    def cross_entropy(rng):
        z = rng.standard_normal((5, 7))
        t = rng.integers(0, 7, size=5)
        w = rng.integers(0, 2, size=5).astype(float)
        w[0] = 1.0
        return [z], lambda x: T.cross_entropy(x, t, w), lambda x: G.ref_cross_entropy(x, t, w)

    def softmax_cross_entropy(rng):
        z = rng.standard_normal(6)
        t = int(rng.integers(0, 6))
        return [z], lambda x: T.softmax_cross_entropy(x, t), lambda x: G.ref_cross_entropy(x[None], [t])

    return [("add", add), ("mul", mul), ("matmul", matmul), ("transpose", transpose), ("reshape", reshape),
            ("sum", sum_), ("mean", mean), ("embedding", embedding), ("layer_norm", layer_norm),
            ("gelu", gelu), ("causal_softmax", causal_softmax), ("cross_entropy", cross_entropy),
            ("softmax_cross_entropy", softmax_cross_entropy)]


def test_c09_gradient_correctness():
    facts = {}
    with criterion(9, "gradient correctness", facts):
        rng = np.random.default_rng(9)
        worst = {}
        failures = []
        for name, build in _ops():
            worst[name] = 0.0
            for trial in range(100):
                arrays, tfn, rfn = build(rng)
                arrays = [a.astype(np.float32).astype(np.float64) for a in arrays]
                leaves = [Tensor(a, requires_grad=True) for a in arrays]
                tfn(*leaves).backward()
                for i, a in enumerate(arrays):
                    def f(v, i=i):
                        args = list(arrays)
                        args[i] = v
                        return float(rfn(*args))
                    err = G.rel_error(leaves[i].grad, G.numeric_grad(f, a, h=G.H))
                    worst[name] = max(worst[name], err)
                    if err >= G.REL_TOL:
                        failures.append((name, trial, i, err))
        facts.update(ops=len(worst), trials_each=100,
                     worst=f"{max(worst, key=worst.get)}:{max(worst.values()):.1e}")
        assert not failures, failures[:5]


# desk-scale runs ------------------------------------------------------------

def _cfg(out: Path, base: ExperimentConfig | None = None, **plant) -> ExperimentConfig:
    d = (base or ExperimentConfig()).to_dict()
    d["output_dir"] = str(out)
    d["plant"].update({"steps": BUDGET_STEPS, "lr": 1e-3, **plant})
    d["erase"]["steps"] = ERASE_STEPS
    return ExperimentConfig.from_dict(d)


@pytest.fixture(scope="module")
def root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


@pytest.fixture(scope="module")
def desk(root):
    cfg = _cfg(root / "base")
    pipeline.stage_train_base(cfg)
    return cfg


def _plant(root, desk, name, stop=0.9, base=None, template=None, **plant):
    cfg = _cfg(root / name, template, **plant)
    base_path = base or Path(desk.output_dir) / "base.qmk"
    t0 = time.perf_counter()
    res, reports = pipeline.stage_plant(cfg, base_path=base_path, stop_at_wpr=stop, check_every=PROBE_EVERY)
    return {"cfg": cfg, "res": res, "reports": reports, "seconds": time.perf_counter() - t0,
            "steps": len(res.step_log), "base": base_path}


@pytest.fixture(scope="module")
def interval_run(root, desk):
    return _plant(root, desk, "interval", strategy="interval")


@pytest.fixture(scope="module")
def direct_run(root, desk):
    return _plant(root, desk, "direct", strategy="direct")


@pytest.fixture(scope="module")
def rollback_run(root, desk):
    # the rollback pattern is about what it cannot reach, so no early stop
    return _plant(root, desk, "rollback", stop=None, strategy="rollback", epsilon=1)


def test_c03_interval_plant(interval_run):
    r = interval_run["reports"]["heldout"]
    facts = {"wpr": fmt(r.wpr), "tmr": fmt(r.tmr), "sr": fmt(r.sr), "n": r.n_samples,
             "steps": interval_run["steps"], "seconds": fmt(interval_run["seconds"])}
    with criterion(3, "interval plant (agnostic)", facts):
        # Q(theta) equality is asserted after every step inside interval_train;
        # reaching here means it held throughout
        wpr, tmr = r.wpr, r.tmr
        assert r.n_samples == 50
        assert tmr == 1.0
        assert interval_run["steps"] <= BUDGET_STEPS
        assert interval_run["seconds"] < BUDGET_SECONDS
        assert wpr >= 0.9


def test_c04_baselines(direct_run, rollback_run):
    d = direct_run["reports"]["heldout"]
    rb = rollback_run["reports"]["heldout"]
    facts = {"direct_wpr": fmt(d.wpr), "direct_tmr": fmt(d.tmr), "direct_steps": direct_run["steps"],
             "rollback_wpr": fmt(rb.wpr), "rollback_tmr": fmt(rb.tmr), "rollback_steps": rollback_run["steps"],
             "rollback_seconds": fmt(rollback_run["seconds"])}
    with criterion(4, "direct and rollback baselines", facts):
        for run in (direct_run, rollback_run):
            assert run["steps"] <= BUDGET_STEPS and run["seconds"] < BUDGET_SECONDS
        d_wpr, d_tmr, rb_wpr, rb_tmr = d.wpr, d.tmr, rb.wpr, rb.tmr
        assert d_wpr >= 0.9 and d_tmr <= 0.2
        assert rb_tmr == 1.0 and rb_wpr <= 0.1


@pytest.fixture(scope="module")
def trigger_run(root):
    tmpl = trigger_config()
    base_cfg = _cfg(root / "trigger", tmpl, strategy="interval")
    pipeline.stage_train_base(base_cfg)
    t0 = time.perf_counter()
    res, reports = pipeline.stage_plant(base_cfg, stop_at_wpr=0.9, check_every=PROBE_EVERY)
    return {"res": res, "reports": reports, "seconds": time.perf_counter() - t0, "steps": len(res.step_log)}


def test_c05_trigger_plant(trigger_run):
    t, n = trigger_run["reports"]["trigger"], trigger_run["reports"]["normal"]
    facts = {"trigger_wpr": fmt(t.wpr), "false_trigger": fmt(n.false_trigger_rate), "tmr_trigger": fmt(t.tmr),
             "tmr_normal": fmt(n.tmr), "n_trigger": t.n_samples, "n_normal": n.n_samples,
             "steps": trigger_run["steps"]}
    with criterion(5, "trigger plant", facts):
        t_wpr, t_tmr, n_tmr, ftr = t.wpr, t.tmr, n.tmr, n.false_trigger_rate
        assert t_tmr == 1.0 and n_tmr == 1.0
        assert ftr <= 0.05
        assert t_wpr >= 0.9


@pytest.fixture(scope="module")
def erase_runs(interval_run):
    cfg = interval_run["cfg"]
    out = {}
    for split in ("erase_ind", "erase_ood"):
        _, reports = pipeline.stage_erase(cfg, split=split, base_path=interval_run["base"])
        out[split] = reports["heldout"]
    return out


def test_c06_erasing(interval_run, erase_runs):
    before = interval_run["reports"]["heldout"].wpr
    ind, ood = erase_runs["erase_ind"].wpr, erase_runs["erase_ood"].wpr
    facts = {"wpr_before": fmt(before), "wpr_after_ind": fmt(ind), "wpr_after_ood": fmt(ood),
             "steps": ERASE_STEPS}
    with criterion(6, "erasing", facts):
        assert ERASE_STEPS <= 2000
        assert before >= 0.9, "precondition: the planted model must watermark first"
        assert ind < 0.2
        assert ood < 0.5


@pytest.fixture(scope="module")
def reverse_run(root, desk):
    d = ExperimentConfig().to_dict()
    d["spec"]["scenario"] = "reverse"
    return _plant(root, desk, "reverse", template=ExperimentConfig.from_dict(d),
                  strategy="interval", phase1_steps=1000, probe_every=50)


def test_c07_reverse(reverse_run):
    r = reverse_run["reports"]["heldout"]
    res = reverse_run["res"]
    phase2 = [s for s in res.strategy_stats if s.get("phase") == 2]
    facts = {"rev_wpr": fmt(r.wpr), "rev_tmr": fmt(r.tmr), "sr": fmt(r.sr),
             "phase1_steps": len(res.strategy_stats) - len(phase2), "phase2_steps": len(phase2)}
    with criterion(7, "reverse watermark", facts):
        # the per-step check ran inside interval_train; confirm the end state too
        for n, q in res.phase1_quantized.items():
            assert quantized_equal(quantize(res.planted_model[n].data), q)
        wpr, tmr = r.wpr, r.tmr
        assert len(phase2) <= BUDGET_STEPS
        assert wpr >= 0.7
        assert tmr >= 0.9


def _shift(before, after, out):
    assert cli.main(["shift-export", "--before", str(before), "--after", str(after), "-o", str(out)]) == 0
    return list(csv.DictReader(io.StringIO(out.read_text())))


def test_c08_shift_export(root, desk, interval_run, direct_run):
    base = Path(desk.output_dir) / "base.qmk"
    iv = _shift(base, Path(interval_run["cfg"].output_dir) / "planted.qmk", root / "shift_interval.csv")
    dr = _shift(base, Path(direct_run["cfg"].output_dir) / "planted.qmk", root / "shift_direct.csv")
    facts = {"interval": ";".join(f"{r['layer']}:{float(r['fp32_shift']):.2e}/{float(r['int8_shift']):g}" for r in iv),
             "direct": ";".join(f"{r['layer']}:{float(r['fp32_shift']):.2e}/{float(r['int8_shift']):.2f}" for r in dr)}
    with criterion(8, "shift export", facts):
        assert all(float(r["int8_shift"]) == 0.0 for r in iv)
        assert any(float(r["int8_shift"]) > 0.0 for r in dr)
        assert all(float(r["fp32_shift"]) > 0.0 for r in iv)
        assert all(float(r["fp32_shift"]) > 0.0 for r in dr)


# 10. determinism --------------------------------------------------------------

def _hashes(d: Path) -> dict[str, str]:
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(d.iterdir()) if p.is_file()}


TINY = {
    "model": {"context_len": 48, "d_model": 16, "n_heads": 2, "n_layers": 1},
    "corpus": {"n_train": 60, "n_heldout": 12, "n_erase_ind": 20, "n_erase_ood": 20},
    "spec": {"watermark_text": "WM!"},
    "plant": {"strategy": "rollback", "steps": 20, "lr": 1e-2},
    "base": {"steps": 30}, "erase": {"steps": 10}, "eval": {"n_samples": 12},
}


def test_c10_determinism(root, desk, direct_run):
    checked = []
    facts = {}
    with criterion(10, "determinism", facts):
        # desk stages, rerun in place
        base_dir = Path(desk.output_dir)
        before = _hashes(base_dir)
        pipeline.stage_train_base(desk)
        assert _hashes(base_dir) == before, "train-base rerun differs"
        checked.append("desk train-base")
        pdir = Path(direct_run["cfg"].output_dir)
        before = _hashes(pdir)
        pipeline.stage_plant(direct_run["cfg"], base_path=direct_run["base"], stop_at_wpr=0.9,
                             check_every=PROBE_EVERY)
        assert _hashes(pdir) == before, "plant rerun differs"
        checked.append("desk plant")
        # every CLI stage on a tiny config, run twice into the same directory
        tiny = root / "tiny"
        cfg_path = root / "tiny.json"
        cfg_path.write_text(json.dumps(dict(TINY, output_dir=str(tiny))))
        argvs = [["train-base", "--config", str(cfg_path)],
                 ["plant", "--config", str(cfg_path)],
                 ["erase", "--config", str(cfg_path), "--split", "erase_ind"],
                 ["erase", "--config", str(cfg_path), "--split", "erase_ood"]]
        runs = []
        for _ in range(2):
            for a in argvs:
                assert cli.main(a) == 0
            runs.append(_hashes(tiny))
        assert runs[0] == runs[1], sorted(k for k in runs[0] if runs[0][k] != runs[1].get(k))
        checked.append("tiny train-base/plant/erase")
        facts.update(checked=" + ".join(checked), files=len(runs[0]))
