import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from goalgaze import experiment as E
from goalgaze.data import gen_synthetic, write_corpus_dir
from goalgaze.errors import ConfigurationError, DimensionError, InputError
from goalgaze.experiment import (
    RESULTS_HEADER,
    GridSpec,
    ResultRow,
    alpha_grid,
    compare_baseline,
    interior_peak_check,
    monotone_check,
    read_results,
    run_grid,
    spearman,
    weight_stats,
    write_results,
)
from goalgaze.layers import AttentionWeights, build_minivgg, save_network
from goalgaze.sdt import SdtReport

from oracles import spearman_brute


def test_alpha_grid_rule():
    assert alpha_grid(1000) == [0.001, 0.002, 0.5, 0.999, 1.0]
    assert alpha_grid(10) == [0.1, 0.2, 0.5, 0.9, 1.0]
    assert alpha_grid(4) == [0.25, 0.5, 0.75, 1.0]


def test_spearman_simple_cases():
    x = np.array([3.0, 1.0, 4.0, 1.5, 9.0])
    assert spearman(x, x) == 1.0
    assert spearman(x, -x) == -1.0
    assert spearman(x, np.ones(5)) is None
    with pytest.raises(DimensionError):
        spearman([1.0], [2.0])
    with pytest.raises(DimensionError):
        spearman([1.0, 2.0], [1.0, 2.0, 3.0])


@settings(max_examples=200, deadline=None)
@given(st.lists(st.tuples(st.integers(0, 4), st.integers(0, 4)), min_size=2, max_size=12))
def test_spearman_with_ties_matches_mean_rank_oracle(pairs):
    x, y = zip(*pairs)
    got, ref = spearman(x, y), spearman_brute(x, y)
    if ref is None:
        assert got is None
    else:
        assert got == pytest.approx(ref, abs=1e-12)


def test_spearman_random_filters_against_oracle():
    rng = np.random.default_rng(0)
    for _ in range(5):
        a, b = rng.random(128), rng.random(128)
        assert spearman(a, b) == pytest.approx(spearman_brute(a, b), abs=1e-12)


def test_weight_stats_cases():
    ws = weight_stats({0.1: AttentionWeights.fresh(16), 1.0: AttentionWeights.fresh(16)})
    assert ws.variance == [0.0, 0.0] and ws.zero_fraction == [0.0, 0.0]
    v = np.random.default_rng(1).random(16)
    ws = weight_stats({0.5: v, 0.2: v.copy(), 1.0: np.where(v > 0.5, v, 0)})
    assert ws.alphas == [0.2, 0.5, 1.0]
    assert ws.adjacent_rho[0] == pytest.approx(1.0)
    assert ws.variance[0] == pytest.approx(np.var(v))
    assert ws.zero_fraction[2] == pytest.approx(np.mean(v <= 0.5))
    with pytest.raises(DimensionError):
        weight_stats({0.1: np.ones(3), 0.2: np.ones(4)})


def _row(t, a, exp, kind, d, c):
    return ResultRow(t, a, exp, kind, dprime=d, criterion=c)


def test_compare_baseline_identical_rows_give_zero():
    rows = [_row(t, 0.5, e, k, 1.0 + t, -0.2) for t in range(3) for e in ("standard", "blended")
            for k in ("attention", "head-retrain")]
    out = compare_baseline(rows)
    for block in out["experiments"].values():
        assert block["mean_delta_dprime"] == 0 and block["mean_delta_criterion"] == 0


def test_compare_baseline_hand_arithmetic():
    rows = [_row(0, 0.5, "standard", "attention", 2.0, -0.5), _row(0, 0.5, "standard", "head-retrain", 1.5, 0.1),
            _row(1, 0.5, "standard", "attention", 1.0, 0.0), _row(1, 0.5, "standard", "head-retrain", 1.25, 0.3),
            _row(1, 0.9, "standard", "attention", 9.0, 9.0)]
    block = compare_baseline(rows)["experiments"]["standard"]
    assert block["mean_delta_dprime"] == pytest.approx((0.5 - 0.25) / 2)
    assert block["mean_delta_criterion"] == pytest.approx((-0.6 - 0.3) / 2)
    assert block["attention_higher_dprime"] and block["attention_lower_criterion"]


def test_compare_baseline_lists_gaps():
    rows = [_row(0, 0.5, "standard", "attention", 1, 0), _row(0, 0.5, "standard", "head-retrain", 1, 0),
            _row(1, 0.5, "standard", "attention", 1, 0)]
    with pytest.raises(InputError, match="target=1/head-retrain"):
        compare_baseline(rows)


def test_results_csv_round_trip(tmp_path):
    rep = SdtReport.from_counts(7, 3, 2, 8, 1)
    rows = [ResultRow(0, 0.1, "standard", "attention", weight_variance=1 / 3, zero_fraction=0.0, epochs=4,
                      seed=123456789).fill(rep),
            ResultRow(1, 1.0, "hard", "head-retrain", epochs=2, seed=5, status="excluded: 3 mined images < 5"),
            ResultRow(2, 0.9, "blended", "attention", status="error: NonFiniteError: boom")]
    write_results(tmp_path / "a.csv", rows)
    assert (tmp_path / "a.csv").read_text().splitlines()[0] == ",".join(RESULTS_HEADER)
    back = read_results(tmp_path / "a.csv")
    assert back == rows
    write_results(tmp_path / "b.csv", back)
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


@pytest.mark.parametrize("seq,inc,ok", [
    ([0.1, 0.2, 0.3], True, True),
    ([0.1, 0.3, 0.29, 0.4], True, True),
    ([0.1, 0.3, 0.25, 0.4], True, False),
    ([0.1, 0.3, 0.29, 0.4, 0.39], True, False),
    ([0.5, 0.4, 0.41, 0.1], False, True),
])
def test_monotone_tolerance(seq, inc, ok):
    assert monotone_check(seq, inc)["pass"] is ok


def test_interior_peak():
    assert interior_peak_check([1.0, 1.5, 1.2, 0.9])["pass"]
    assert not interior_peak_check([1.0, 0.9, 0.8, 1.1])["pass"]
    assert not interior_peak_check([1.0, 1.0, 1.0])["pass"]


# a tiny end-to-end grid

@pytest.fixture(scope="module")
def tiny(tmp_path_factory):
    root = tmp_path_factory.mktemp("grid")
    splits = {"train": gen_synthetic(0, 4, 16, "train"), "test": gen_synthetic(1, 4, 8, "test"),
              "pool": gen_synthetic(2, 4, 10, "pool", hard=0.5)}
    write_corpus_dir(root / "data", splits)
    net = build_minivgg(4, seed=0, widths=(4, 8, 8, 8), hidden=16)
    save_network(net.freeze(), root / "base")
    return root


def _spec(root, out, **kw):
    base = dict(base=str(root / "base"), data=str(root / "data"), out=str(out), targets=[0, 2],
                alphas=[0.25, 1.0], experiments=["standard"], n_blend_pairs=4,
                train={"max_epochs": 2, "lr": 0.01})
    base.update(kw)
    return GridSpec(**base)


def test_grid_row_count_and_reproducibility(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("GOALGAZE_THREADS", "1")
    rows = run_grid(_spec(tiny, tmp_path / "a"))
    assert len(rows) == 2 * 2 * 1 * 2
    assert sum(r.model_kind == "attention" for r in rows) == 4
    assert all(r.status == "ok" for r in rows)
    assert (tmp_path / "a" / "weights" / "2" / "0.25" / "attn.ggtn").exists()
    rows2 = run_grid(_spec(tiny, tmp_path / "b"))
    assert rows == rows2
    assert (tmp_path / "a" / "results.csv").read_bytes() == (tmp_path / "b" / "results.csv").read_bytes()
    manifest = json.loads((tmp_path / "a" / "grid_manifest.json").read_text())
    assert set(manifest["inputs"]) == {"base", "data"} and "0/0.25" in manifest["cell_seeds"]


def test_grid_without_baseline(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("GOALGAZE_THREADS", "1")
    rows = run_grid(_spec(tiny, tmp_path, include_baseline=False))
    assert len(rows) == 4 and {r.model_kind for r in rows} == {"attention"}


def test_all_experiments_share_one_training(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("GOALGAZE_THREADS", "1")
    calls = []
    real = E.train_attention
    monkeypatch.setattr(E, "train_attention", lambda *a, **k: calls.append(1) or real(*a, **k))
    rows = run_grid(_spec(tiny, tmp_path, experiments=["standard", "blended", "hard"], targets=[1], alphas=[0.5],
                          hard_min_images=50))
    assert len(calls) == 1
    assert len(rows) == 3 * 2
    hard = [r for r in rows if r.experiment == "hard"]
    assert all(r.status.startswith("excluded") for r in hard)
    vw = {r.weight_variance for r in rows if r.model_kind == "attention"}
    assert len(vw) == 1


def test_resume_skips_finished_cells(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("GOALGAZE_THREADS", "1")
    spec = _spec(tiny, tmp_path)

    class Interrupt(Exception):
        pass

    def stop_after_first(info):
        raise Interrupt

    with pytest.raises(Interrupt):
        run_grid(spec, on_cell_done=stop_after_first)
    assert not (tmp_path / "results.csv").exists()
    calls = []
    real = E.train_attention
    monkeypatch.setattr(E, "train_attention", lambda base, cfg, **k: calls.append((cfg.target, cfg.alpha))
                        or real(base, cfg, **k))
    resumed = run_grid(spec)
    assert (0, 0.25) not in [(t[0], a) for t, a in calls]
    assert len(calls) == 3
    fresh = run_grid(_spec(tiny, tmp_path / "fresh"))
    assert resumed == fresh


def test_failing_cell_is_isolated(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("GOALGAZE_THREADS", "1")
    real = E.train_attention

    def flaky(base, cfg, **k):
        if cfg.target == (2,) and cfg.alpha == 1.0:
            raise FloatingPointError("diverged")
        return real(base, cfg, **k)

    monkeypatch.setattr(E, "train_attention", flaky)
    rows = run_grid(_spec(tiny, tmp_path))
    bad = [r for r in rows if r.status != "ok"]
    assert len(bad) == 2 and all(r.target == 2 and r.alpha == 1.0 for r in bad)
    assert all("diverged" in r.status for r in bad)
    assert len(rows) == 8


def test_grid_parallel_matches_serial(tiny, tmp_path, monkeypatch):
    monkeypatch.setenv("GOALGAZE_THREADS", "2")
    par = run_grid(_spec(tiny, tmp_path / "p"))
    monkeypatch.setenv("GOALGAZE_THREADS", "1")
    ser = run_grid(_spec(tiny, tmp_path / "s"))
    assert par == ser


def test_grid_validation(tiny, tmp_path):
    with pytest.raises(ConfigurationError):
        E.GridContext.from_spec(_spec(tiny, tmp_path, base=str(tmp_path / "missing")))
    with pytest.raises(ConfigurationError):
        E.GridContext.from_spec(_spec(tiny, tmp_path, alphas=[0.1]))
    with pytest.raises(ConfigurationError):
        E.GridContext.from_spec(_spec(tiny, tmp_path, targets=[0, 0]))
    with pytest.raises(ConfigurationError):
        GridSpec.from_dict({"base": "b", "data": "d", "oops": 1})


def test_worker_count_env(monkeypatch):
    monkeypatch.setenv("GOALGAZE_THREADS", "3")
    assert E.worker_count(GridSpec("b", "d", workers=8)) == 3
    monkeypatch.delenv("GOALGAZE_THREADS")
    assert E.worker_count(GridSpec("b", "d", workers=2)) == 2


def test_analyze_recomputes_means(tmp_path):
    rows = []
    for t in range(3):
        for i, a in enumerate([0.25, 0.5, 1.0]):
            rep = SdtReport.from_counts(5 + i + t % 2, 5 - i - t % 2, 1 + i, 9 - i, 1)
            rows.append(ResultRow(t, a, "standard", "attention", weight_variance=i * 0.1,
                                  zero_fraction=i * 0.05).fill(rep))
    s = E.analyze(rows)
    block = s["experiments"]["standard"]
    for i, a in enumerate(block["alphas"]):
        sel = [r for r in rows if r.alpha == a]
        assert block["mean_dprime"][i] == pytest.approx(sum(r.dprime for r in sel) / 3)
    assert block["checks"]["hit_rate_nondecreasing"]["pass"]
    assert s["weights"]["variance_grows"] and s["weights"]["zero_fraction_grows"]
    assert math.isclose(s["weights"]["mean_zero_fraction"][-1], 0.1)
