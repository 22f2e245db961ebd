import datetime as dt
import json
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from latent_states._validation import ConfigError
from latent_states.ingest import ClinicalRecord
from latent_states.predict import (
    FeatureSetSpec, LoocvResult, RidgeRegression, assemble_features, baseline_features, bootstrap_ci,
    daily_proportions, expand_specs, loo_residuals, loocv_evaluate, mean_of, proportion_features, random_word_features,
    random_word_values, ridge_fit, run_experiment_grid, write_report,
)
from latent_states.preprocess import DailyActivitySequence

D0 = dt.date(2024, 1, 1)


def day(pid, offset, counts):
    """A day with the given slot counts per token, padded with ``nowhere``."""
    slots = [t for t, c in counts.items() for _ in range(c)]
    slots += ["nowhere"] * (72 - len(slots))
    return DailyActivitySequence(pid, D0 + dt.timedelta(days=offset), tuple(slots))


def record(pid, **kw):
    base = dict(mmse=24, adas_cog=15.0, hads_depression=5, hads_anxiety=4, age=79.0, gender="female",
                lives_alone=True, diagnosis="AD")
    base.update(kw)
    return ClinicalRecord(pid, dt.date(2024, 7, 1), **base)


def gd_ridge(X, y, lam, iters=200_000, tol=1e-14):
    """Plain gradient descent on the ridge objective with an unpenalised intercept."""
    n, p = X.shape
    Z = np.hstack([np.ones((n, 1)), X])
    reg = np.r_[0.0, np.full(p, lam)]
    L = 2 * (np.linalg.eigvalsh(Z.T @ Z).max() + lam)
    theta = np.zeros(p + 1)
    for _ in range(iters):
        g = 2 * (Z.T @ (Z @ theta - y) + reg * theta)
        step = g / L
        theta -= step
        if np.abs(step).max() < tol:
            break
    return theta[1:], theta[0]


# -- features ---------------------------------------------------------------

def test_constant_kitchen_days():
    days = [day("p", i, {"kitchen": 3}) for i in range(3)]
    f = baseline_features(days)
    assert f["kitchen_count_mean"] == 3.0 and f["kitchen_count_var"] == 0.0
    assert "nowhere_count_mean" not in f


def test_proportions_sum_to_one():
    days = [day("p", 0, {"kitchen": 3, "lounge": 1}), day("p", 1, {}), day("p", 2, {"bathroom": 2, "sleep": 6})]
    P = daily_proportions(days)
    assert P.shape[0] == 2
    assert np.allclose(P.sum(axis=1), 1.0, atol=1e-15)
    assert proportion_features(days)["kitchen_prop_mean"] == pytest.approx(0.375)


def test_random_word_golden_and_determinism():
    vals = random_word_values(7)
    assert vals["kitchen"] == 0.22520718999059186
    assert vals["sleep"] == 0.005265304565574724
    assert vals == random_word_values(7) and vals != random_word_values(8)
    f = random_word_features([day("p", 0, {"kitchen": 72})], 7)
    assert f == {"random_word_mean": vals["kitchen"], "random_word_var": 0.0}


def test_feature_set_parsing_and_names():
    s = FeatureSetSpec.parse("State+characteristics")
    assert s.name == "state+characteristics"
    assert FeatureSetSpec.parse("randomword").name == "random_word"
    with pytest.raises(ConfigError):
        FeatureSetSpec.parse("shap")
    ex = expand_specs([s, FeatureSetSpec.parse("state")], "delta_mmse")
    assert [e.name for e in ex] == ["state+characteristics", "state+characteristics+current_scores", "state"]
    assert len(expand_specs([s], "mmse")) == 1


def test_assembly_excludes_with_reasons():
    days = {"a": [day("a", 0, {"kitchen": 2})], "b": [day("b", 0, {"kitchen": 5})], "c": []}
    clin = {"a": record("a"), "b": record("b", hads_anxiety=None), "c": record("c")}
    states = {"a": np.array([0.6, 0.4]), "b": np.array([0.5, 0.5])}
    d = assemble_features(days, states, clin, FeatureSetSpec.parse("state+characteristics"), "mmse")
    assert d.rows == ["a"]
    assert "hads_anxiety" in d.excluded["b"] and d.excluded["c"] == "no state vector"
    assert d.columns[:2] == ["state1", "state2"] and "gender_female" in d.columns
    d2 = assemble_features(days, None, clin, FeatureSetSpec.parse("baseline"), "delta_mmse")
    assert d2.rows == [] and d2.excluded["a"] == "target delta_mmse missing"
    with pytest.raises(ConfigError):
        assemble_features(days, None, clin, FeatureSetSpec.parse("baseline"), "moca")


def test_current_scores_feature_flag():
    clin = {"a": record("a")}
    spec = FeatureSetSpec(frozenset({"characteristics"}), include_current_scores=True)
    d = assemble_features({}, None, clin, spec)
    assert d.columns[-2:] == ["current_mmse", "current_adas_cog"] and d.X[0, -2] == 24.0


# -- ridge --------------------------------------------------------------------

def test_exact_line_recovered():
    x = np.arange(6.0)[:, None]
    w, b = ridge_fit(x, 2 * x[:, 0] + 1, 0.0)
    assert w[0] == pytest.approx(2.0, abs=1e-12) and b == pytest.approx(1.0, abs=1e-12)


def test_huge_penalty_gives_mean_predictor():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(20, 3)), rng.normal(size=20)
    w, b = ridge_fit(X, y, 1e9)
    assert np.abs(w).max() < 1e-6
    assert b == pytest.approx(y.mean(), abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_closed_form_matches_gradient_descent(seed):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(40, 4))
    y = X @ rng.normal(size=4) + rng.normal(size=40)
    lam = float(rng.choice([0.01, 0.1, 1.0, 10.0]))
    w, b = ridge_fit(X, y, lam)
    w2, b2 = gd_ridge(X, y, lam)
    assert np.abs(np.r_[w - w2, b - b2]).max() < 1e-6


def test_normal_equation_residual():
    rng = np.random.default_rng(3)
    X, y = rng.normal(size=(30, 5)), rng.normal(size=30)
    w, b = ridge_fit(X, y, 0.7)
    r = y - X @ w - b
    assert np.abs(X.T @ r - 0.7 * w).max() < 1e-10
    assert abs(r.sum()) < 1e-10


@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3), st.floats(1.01, 10))
@settings(max_examples=60, deadline=None)
def test_shrinkage_monotone_in_lambda(seed, lam, factor):
    rng = np.random.default_rng(seed)
    X, y = rng.normal(size=(15, 3)), rng.normal(size=15)
    w1, _ = ridge_fit(X, y, lam)
    w2, _ = ridge_fit(X, y, lam * factor)
    assert np.linalg.norm(w2) <= np.linalg.norm(w1) * (1 + 1e-12)


def test_singular_system_at_zero_penalty():
    X = np.c_[np.arange(5.0), 2 * np.arange(5.0)]
    with pytest.raises(np.linalg.LinAlgError, match="lambda > 0"):
        ridge_fit(X, np.arange(5.0), 0.0)
    ridge_fit(X, np.arange(5.0), 0.1)


def test_hat_matrix_loo_matches_refits():
    rng = np.random.default_rng(1)
    X, y = rng.normal(size=(12, 3)), rng.normal(size=12)
    fast = loo_residuals(X, y, 0.5)
    slow = []
    for i in range(12):
        keep = np.arange(12) != i
        w, b = ridge_fit(X[keep], y[keep], 0.5)
        slow.append(y[i] - X[i] @ w - b)
    assert np.allclose(fast, slow, atol=1e-10)


def test_four_point_hand_loocv():
    x, y, lam = [0, 1, 2, 4], [1, 2, 2, 5], 1
    errs = []
    for i in range(4):
        xs = [Fraction(a) for j, a in enumerate(x) if j != i]
        ys = [Fraction(b) for j, b in enumerate(y) if j != i]
        m, yb = sum(xs) / 3, sum(ys) / 3
        s2 = sum((a - m) ** 2 for a in xs) / 3
        pred = yb + sum((a - m) * (b - yb) for a, b in zip(xs, ys)) * (x[i] - m) / (s2 * (3 + lam))
        errs.append(abs(pred - y[i]))
    assert errs == [Fraction(1, 8), Fraction(1, 12), Fraction(11, 12), Fraction(53, 24)]
    assert sum(errs) / 4 == Fraction(5, 6)
    res = loocv_evaluate(np.array(x, float)[:, None], np.array(y, float), lam)
    want = np.array([float(e) for e in errs])
    # the rationals are not binary fractions; agreement is to a few units in the
    # last place of the predictions, whose magnitude is set by the targets
    assert np.all(np.abs(res.abs_errors - want) <= 4 * np.spacing(5.0))
    assert abs(res.mae - 5 / 6) <= 2 * np.spacing(5 / 6)


def test_loocv_never_sees_held_out_row():
    rng = np.random.default_rng(2)
    X, y = rng.normal(size=(8, 2)), rng.normal(size=8)
    base = loocv_evaluate(X, y, 1.0)
    y2 = y.copy()
    y2[0] += 1000.0
    moved = loocv_evaluate(X, y2, 1.0)
    assert moved.predictions[0] == base.predictions[0]


def test_constant_target_predicted_exactly():
    X = np.random.default_rng(0).normal(size=(6, 2))
    res = loocv_evaluate(X, np.full(6, 7.0), [0.1, 1.0])
    assert np.allclose(res.predictions, 7.0, atol=1e-12) and res.mae < 1e-12


def test_lambda_grid_picks_per_fold_and_ties_prefer_larger():
    X = np.random.default_rng(0).normal(size=(10, 2))
    m = RidgeRegression(alphas=[0.01, 10.0]).fit(X, np.full(10, 3.0))
    assert m.alpha_ == 10.0
    res = loocv_evaluate(X, X[:, 0] * 3, [0.01, 0.1, 1.0, 10.0])
    assert len(res.alphas) == 10 and set(res.alphas) <= {0.01, 0.1, 1.0, 10.0}


def test_standardisation_drops_constant_columns():
    X = np.c_[np.arange(5.0), np.ones(5)]
    m = RidgeRegression(alpha=0.1).fit(X, np.arange(5.0))
    assert m.dropped_columns_ == [1] and m.coef_.shape == (1,)
    assert m.get_params()["alpha"] == 0.1


def test_loocv_needs_three_rows():
    with pytest.raises(ValueError):
        loocv_evaluate(np.zeros((2, 1)), np.zeros(2))


@given(st.lists(st.floats(-50, 50), min_size=3, max_size=30))
@settings(max_examples=80, deadline=None)
def test_mae_never_exceeds_rmse(errors):
    e = np.array(errors)
    r = LoocvResult(e, np.zeros_like(e), [])
    assert r.mae <= r.rmse * (1 + 1e-12)


# -- bootstrap ----------------------------------------------------------------

def test_identical_errors_degenerate_interval():
    (m_lo, m_hi), (r_lo, r_hi) = bootstrap_ci(np.full(5, 2.0), np.full(5, 4.0), 200, seed=1)
    assert m_lo == m_hi == 2.0 and r_lo == r_hi == 2.0


def test_interval_brackets_point_estimate_and_is_deterministic():
    rng = np.random.default_rng(0)
    e = rng.normal(size=25)
    a, s = np.abs(e), e ** 2
    (m_lo, m_hi), (r_lo, r_hi) = bootstrap_ci(a, s, 1000, seed=11)
    assert m_lo <= mean_of(a) <= m_hi and r_lo <= np.sqrt(mean_of(s)) <= r_hi
    assert bootstrap_ci(a, s, 1000, seed=11) == ((m_lo, m_hi), (r_lo, r_hi))
    assert bootstrap_ci(a, s, 1000, seed=12) != ((m_lo, m_hi), (r_lo, r_hi))


def test_bootstrap_golden():
    a = np.array([0.5, 1.0, 2.0, 4.0])
    (m_lo, m_hi), _ = bootstrap_ci(a, a ** 2, 1000, seed=0)
    # recompute with the documented per-resample generator
    maes = [np.mean(a[np.random.default_rng([0, r]).integers(0, 4, 4)]) for r in range(1000)]
    assert (m_lo, m_hi) == pytest.approx(tuple(np.percentile(maes, [2.5, 97.5])), abs=1e-12)


def test_bootstrap_errors():
    with pytest.raises(ConfigError):
        bootstrap_ci([1, 2, 3], [1, 4, 9], 0)
    with pytest.raises(ValueError):
        bootstrap_ci([1, 2], [1, 4], 10)


# -- experiment grid -------------------------------------------------------------

def _cohort(n=8, seed=0):
    rng = np.random.default_rng(seed)
    days, clin, states = {}, {}, {}
    for i in range(n):
        pid = f"p{i}"
        days[pid] = [day(pid, d, {"kitchen": int(rng.integers(0, 20)), "lounge": int(rng.integers(0, 20))})
                     for d in range(40)]
        clin[pid] = record(pid, mmse=int(rng.integers(15, 30)), delta_mmse=float(rng.integers(-3, 1)),
                           delta_adas=float(rng.normal()), gender=("female", "male")[i % 2])
        v = rng.random(3)
        states[pid] = v / v.sum()
    return days, clin, states


def test_grid_shape_and_report(tmp_path):
    days, clin, states = _cohort()
    specs = [FeatureSetSpec.parse(s) for s in ("baseline", "state", "state+characteristics")]
    rows = run_experiment_grid(days, lambda w: states, clin, specs, ["mmse", "delta_mmse"], [7, 30],
                               n_resamples=50, seed=3)
    # mmse: 3 sets; delta_mmse: 4 sets (characteristics doubled) -> 7 per window
    assert len(rows) == 14
    assert all(r.mae <= r.rmse and r.mae_lo <= r.mae_hi and r.n == 8 for r in rows)
    write_report(tmp_path / "p.csv", tmp_path / "p.json", rows, {"seed": 3})
    doc = json.loads((tmp_path / "p.json").read_text())
    assert len(doc["rows"]) == 14 and doc["metadata"]["seed"] == 3
    assert (tmp_path / "p.csv").read_text().splitlines()[0].startswith("model,feature_set,target,window_days,mae")


def test_grid_rejects_tiny_cohorts():
    days, clin, states = _cohort(n=2)
    with pytest.raises(ValueError, match="usable participants"):
        run_experiment_grid(days, None, clin, [FeatureSetSpec.parse("baseline")], ["mmse"], [7], n_resamples=10)
