import math

import numpy as np
import pytest
from scipy import stats

from headwaylab.fitting import ErlangParams, PatchModel
from headwaylab.properties import (EstimatorConfig, EvalError, ParseError,
                                   PropertyError, SteadyStateQuery, UndefinedSample,
                                   _Accumulator, _verdict, bph_query, check_assertions,
                                   estimate_steady_state, evaluate_expr, evwt_query,
                                   ewt_query, expand_per_patch, headway_query,
                                   parse_quatex, write_results_tsv)
from headwaylab.simulate import SimConfig, build_model

EWT_TEXT = ('ewt() = 0.5 * (s.rval("y_6") - mu_tot) * (s.rval("y_6") - mu_tot) / mu_tot;\n'
            'S [ ewt(), "c_6" ] < 75;\n')


def test_parse_published_ewt_property():
    prop = parse_quatex(EWT_TEXT)
    assert set(prop.functions) == {"ewt"}
    q = prop.assertions[0]
    assert (q.function, q.clock, q.threshold) == ("ewt", "c_6", 75.0)


def test_parse_if_then_else_example():
    prop = parse_quatex('f() = if {s.rval("Y") > 5} then 1 else 0 fi;')
    assert evaluate_expr(prop.functions["f"], lambda n: 6.0) == 1.0
    assert evaluate_expr(prop.functions["f"], lambda n: 5.0) == 0.0  # strict >


def test_parse_missing_fi_reports_position():
    with pytest.raises(ParseError) as err:
        parse_quatex('f() = if {s.rval("Y") > 5} then 1 else 0;')
    assert "fi" in str(err.value)
    assert "line 1" in str(err.value)


def test_parse_undefined_function():
    with pytest.raises(PropertyError):
        parse_quatex('S [ ghost(), "time" ] < 1;')


def test_parse_recursion_rejected():
    with pytest.raises(PropertyError):
        parse_quatex('f() = g() + 1;\ng() = f();\nS [ f(), "time" ] < 1;')


def test_eval_constants_arithmetic():
    prop = parse_quatex("f() = 2*3+1;")
    assert evaluate_expr(prop.functions["f"], lambda n: 0.0) == 7.0


def test_eval_precedence_and_unary():
    prop = parse_quatex("f() = -2 + 3 * 4 - 6 / 2;")
    assert evaluate_expr(prop.functions["f"], lambda n: 0.0) == 7.0


def test_eval_unknown_rval_names_identifier():
    prop = parse_quatex('f() = s.rval("Q");')

    def rv(name):
        raise EvalError(f"unknown state quantity {name!r}")

    with pytest.raises(EvalError) as err:
        evaluate_expr(prop.functions["f"], rv)
    assert "Q" in str(err.value)


def test_eval_division_by_zero():
    prop = parse_quatex("f() = 1 / (2 - 2);")
    with pytest.raises(EvalError):
        evaluate_expr(prop.functions["f"], lambda n: 0.0)


def test_eval_undefined_sentinel_skips():
    prop = parse_quatex('f() = s.rval("y_1");')
    with pytest.raises(UndefinedSample):
        evaluate_expr(prop.functions["f"], lambda n: math.inf)


def test_expand_per_patch():
    out = expand_per_patch('e() = s.rval("y_j") + 0;\nS [ e(), "c_j" ] < 5;', [2, 7])
    assert 'y_2' in out[2] and 'c_2' in out[2]
    assert 'y_7' in out[7]


def two_patch_model(mu1=120.0, mu2=360.0, seed=5):
    pm = PatchModel([ErlangParams(1, 1 / mu1), ErlangParams(1, 1 / mu2)])
    return build_model(pm, SimConfig(n_buses=1, timetable=False, seed=seed))


def in_patch1_text():
    # single bus: in patch 1 iff it departed patch 2 more recently than patch 1
    return ('inp1() = if {s.rval("z_1_2") < s.rval("z_1_1")} then 1 else 0 fi;\n'
            'S [ inp1(), "time" ] < 0.5;\n')


def test_constant_function_estimates_exactly():
    prop = parse_quatex('k() = 3.25;\nS [ k(), "time" ] < 4;')
    model = two_patch_model()
    res = estimate_steady_state(model, prop.assertions[0], prop.functions,
                                EstimatorConfig(warmup_time=100.0, wall_budget=20.0,
                                                max_sim_time=200_000.0), seed=1)
    assert res.estimate == pytest.approx(3.25, abs=1e-12)
    assert res.halfwidth == 0.0
    assert res.verdict == "satisfied"


def test_constant_one_under_counter_clock():
    prop = parse_quatex('one() = 1;\nS [ one(), "c_1" ] < 2;')
    model = two_patch_model()
    res = estimate_steady_state(model, prop.assertions[0], prop.functions,
                                EstimatorConfig(warmup_time=100.0, wall_budget=20.0,
                                                max_sim_time=300_000.0), seed=1)
    assert res.estimate == pytest.approx(1.0, abs=1e-12)
    assert res.halfwidth == 0.0


def test_estimator_linearity_same_trajectory():
    model = two_patch_model()
    cfg = EstimatorConfig(warmup_time=500.0, wall_budget=30.0, max_sim_time=400_000.0,
                          rel_halfwidth_target=0.0)  # run to the time budget
    base = parse_quatex(in_patch1_text())
    scaled = parse_quatex(
        'inp1() = if {s.rval("z_1_2") < s.rval("z_1_1")} then 1 else 0 fi;\n'
        'g() = 3 * inp1() + 2;\nS [ g(), "time" ] < 99;')
    r1 = estimate_steady_state(model, base.assertions[0], base.functions, cfg,
                               seed=77, replication=0)
    r2 = estimate_steady_state(model, scaled.assertions[0], scaled.functions, cfg,
                               seed=77, replication=0)
    assert r2.estimate == pytest.approx(3 * r1.estimate + 2, abs=1e-9)
    assert r2.halfwidth == pytest.approx(3 * r1.halfwidth, abs=1e-9)


def test_alternating_renewal_estimate():
    mu1, mu2 = 120.0, 360.0
    model = two_patch_model(mu1, mu2)
    prop = parse_quatex(in_patch1_text())
    res = estimate_steady_state(model, prop.assertions[0], prop.functions,
                                EstimatorConfig(warmup_time=5000.0, wall_budget=30.0,
                                                rel_halfwidth_target=0.05), seed=3)
    expect = mu1 / (mu1 + mu2)
    assert abs(res.estimate - expect) <= max(2.5 * res.halfwidth, 0.02)


def test_batch_means_match_direct_t_interval():
    rng = np.random.default_rng(42)
    xs = rng.normal(5.0, 2.0, size=32)
    acc = _Accumulator()
    for x in xs:
        acc.add(1.0, float(x))
    means, total = acc.batch_means(32)
    assert total == 32.0
    assert np.allclose(np.sort(means), np.sort(xs))
    est = means.mean()
    hw = stats.t.ppf(0.975, 31) * means.std(ddof=1) / math.sqrt(32)
    direct = stats.t.interval(0.95, 31, loc=xs.mean(), scale=stats.sem(xs))
    assert abs((est - hw) - direct[0]) < 1e-9
    assert abs((est + hw) - direct[1]) < 1e-9


def test_accumulator_consolidation_preserves_totals():
    acc = _Accumulator(limit=64)
    rng = np.random.default_rng(0)
    ws = rng.uniform(0.5, 2.0, size=1000)
    fs = rng.normal(3.0, 1.0, size=1000)
    for w, f in zip(ws, fs):
        acc.add(float(w), float(f))
    means, total = acc.batch_means(8)
    assert total == pytest.approx(ws.sum())
    assert means.mean() == pytest.approx((ws * fs).sum() / ws.sum(), rel=1e-6)


def test_verdict_rules_and_monotonicity():
    assert _verdict(1.0, 0.1, 2.0, True) == "satisfied"
    assert _verdict(3.0, 0.5, 2.0, True) == "violated"
    assert _verdict(2.0, 0.5, 2.0, True) == "undecided"
    assert _verdict(1.0, 0.1, 2.0, False) == "undecided"
    # raising the threshold never turns satisfied into violated
    order = {"violated": 0, "undecided": 1, "satisfied": 2}
    for thr in np.linspace(0.5, 4.0, 30):
        prev = None
        for thr2 in np.linspace(thr, 5.0, 10):
            v = _verdict(1.7, 0.3, thr2, True)
            if prev is not None:
                assert order[v] >= order[prev]
            prev = v


def test_unobserved_event_reports_blank(tmp_path):
    # threshold event that never happens: y_1 > 1e9
    model = two_patch_model()
    prop = parse_quatex('rare() = if {s.rval("y_1") > 1000000000} then 1 else 0 fi;\n'
                        'S [ rare(), "c_1" ] < 0.05;')
    res = estimate_steady_state(model, prop.assertions[0], prop.functions,
                                EstimatorConfig(warmup_time=100.0, wall_budget=5.0,
                                                max_sim_time=100_000.0), seed=2)
    assert not res.event_observed
    assert res.verdict == "undecided"
    path = tmp_path / "results.tsv"
    write_results_tsv([res], str(path), ["rare"])
    line = path.read_text().splitlines()[1]
    assert "\t-\t-\t-\t" in line


def test_check_assertions_runs_each_query():
    model = two_patch_model()
    prop = parse_quatex(in_patch1_text() + '\none() = 1;\nS [ one(), "time" ] < 2;')
    cfg = EstimatorConfig(warmup_time=200.0, wall_budget=10.0, max_sim_time=150_000.0)
    results = check_assertions(model, prop, cfg, seed=6)
    assert len(results) == 2
    assert results[1].estimate == pytest.approx(1.0)


def test_bad_clock_rejected():
    model = two_patch_model()
    prop = parse_quatex('one() = 1;\nS [ one(), "y_1" ] < 2;')
    with pytest.raises(PropertyError):
        estimate_steady_state(model, prop.assertions[0], prop.functions,
                              EstimatorConfig(wall_budget=1.0), seed=1)


def test_query_template_helpers_parse():
    for text in (ewt_query(3), evwt_query(3), bph_query(3), headway_query(3)):
        prop = parse_quatex(text)
        assert len(prop.assertions) == 1
