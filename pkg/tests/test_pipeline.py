import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bridgerec.data import build_sequences
from bridgerec.models import TrainConfig, predict_batch, pretrain
from bridgerec.pipeline import (AmazonTask, ExperimentPlan, SyntheticSpec,
                                SyntheticTask, compute_metrics,
                                generate_synthetic, run_cold, run_suite,
                                run_warm, sweep_plans, write_suite_csv)

SMALL = dict(n_users_src=140, n_users_tgt=140, n_overlap=100,
             n_items_src=90, n_items_tgt=90, k_true=5, ratings_per_user=15)


def _plan(spec, method, seed=0, beta=0.2, **kw):
    defaults = dict(pretrain=TrainConfig(lr=0.01, epochs=100),
                    bridge=TrainConfig(lr=0.01, epochs=50),
                    finetune=TrainConfig(lr=0.01, epochs=100))
    defaults.update(kw)
    return ExperimentPlan(task=SyntheticTask(spec), method=method, k=spec.k_true,
                          beta=beta, seed=seed, **defaults)


# ---------------------------------------------------------------------------
# metrics

def test_metrics_perfect_prediction():
    assert compute_metrics([4.0], [4.0]) == (0.0, 0.0)


def test_metrics_equal_errors():
    mae, rmse = compute_metrics([4.0, 1.0], [2.0, 3.0])
    assert mae == 2.0 and rmse == 2.0


def test_metrics_hand_arithmetic():
    # errors 4 and 0: mae = 2, rmse = sqrt((16 + 0) / 2)
    mae, rmse = compute_metrics([5.0, 3.0], [1.0, 3.0])
    assert mae == 2.0
    np.testing.assert_allclose(rmse, math.sqrt(8.0), rtol=1e-15)


def test_metrics_reject_empty_and_mismatched():
    with pytest.raises(ValueError):
        compute_metrics([], [])
    with pytest.raises(ValueError):
        compute_metrics([1.0], [1.0, 2.0])


@settings(deadline=None, max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 5), st.floats(0, 5)), min_size=1, max_size=20))
def test_mae_never_exceeds_rmse(pairs):
    r, p = zip(*pairs)
    mae, rmse = compute_metrics(r, p)
    assert mae <= rmse + 1e-12


# ---------------------------------------------------------------------------
# plan validation

def test_plan_rejects_bad_fields():
    task = SyntheticTask(SyntheticSpec())
    with pytest.raises(ValueError):
        ExperimentPlan(task=task, method="nope")
    with pytest.raises(ValueError):
        ExperimentPlan(task=task, method="tgt", beta=1.2)
    with pytest.raises(ValueError):
        ExperimentPlan(task=task, method="tgt", base_model="svd")
    with pytest.raises(ValueError):
        ExperimentPlan(task=task, method="tgt", k=0)


def test_plan_enforces_lr_grid_unless_overridden():
    task = SyntheticTask(SyntheticSpec())
    with pytest.raises(ValueError, match="grid"):
        ExperimentPlan(task=task, method="tgt", pretrain=TrainConfig(lr=0.003))
    plan = ExperimentPlan(task=task, method="tgt", pretrain=TrainConfig(lr=0.003),
                          allow_off_grid_lr=True)
    assert plan.pretrain.lr == 0.003


def test_task_labels():
    assert SyntheticTask(SyntheticSpec()).label == "synthetic"
    assert AmazonTask("data/movies.csv", "data/music.csv").label == "movies->music"
    assert AmazonTask("a.csv", "b.csv", name="task1").label == "task1"


# ---------------------------------------------------------------------------
# synthetic generator

def test_synthetic_is_deterministic():
    spec = SyntheticSpec(**SMALL)
    a_src, a_tgt, a_truth = generate_synthetic(spec, seed=3)
    b_src, b_tgt, b_truth = generate_synthetic(spec, seed=3)
    np.testing.assert_array_equal(a_src.rating, b_src.rating)
    np.testing.assert_array_equal(a_tgt.item_idx, b_tgt.item_idx)
    np.testing.assert_array_equal(a_truth.src_user_factors, b_truth.src_user_factors)
    assert a_src.users.backward == b_src.users.backward


def test_synthetic_respects_rating_bounds_and_disjoint_items():
    spec = SyntheticSpec(**SMALL, noise_sd=0.3)
    src, tgt, _ = generate_synthetic(spec, seed=1)
    for ds in (src, tgt):
        assert ds.rating.min() >= 0.0 and ds.rating.max() <= 5.0
    assert not (set(src.items.backward) & set(tgt.items.backward))
    assert len(set(src.users.backward) & set(tgt.users.backward)) == spec.n_overlap


def test_synthetic_timestamps_order_each_user():
    src, _, _ = generate_synthetic(SyntheticSpec(**SMALL), seed=2)
    for user, seq_rows in build_sequences(src).items():
        assert len(seq_rows) == SMALL["ratings_per_user"]


def test_synthetic_ratings_match_planted_factors():
    spec = SyntheticSpec(**SMALL, noise_sd=0.0)
    src, tgt, truth = generate_synthetic(spec, seed=4)
    for ds, uf, vf in ((src, truth.src_user_factors, truth.src_item_factors),
                       (tgt, truth.tgt_user_factors, truth.tgt_item_factors)):
        exact = np.einsum("bk,bk->b", uf[ds.user_idx], vf[ds.item_idx])
        np.testing.assert_allclose(ds.rating, np.clip(exact, 0, 5), atol=1e-12)


def test_synthetic_identity_bridge_equates_overlap_factors():
    spec = SyntheticSpec(**SMALL, bridge_family="shared_linear", identity_bridge=True)
    src, tgt, truth = generate_synthetic(spec, seed=5)
    for u in truth.overlap_ids[:10]:
        np.testing.assert_array_equal(truth.src_user_factors[src.users.index(u)],
                                      truth.tgt_user_factors[tgt.users.index(u)])


def test_synthetic_noiseless_world_is_learnable():
    spec = SyntheticSpec(**SMALL, noise_sd=0.0)
    src, _, _ = generate_synthetic(spec, seed=0)
    model, _ = pretrain(src, k=spec.k_true, config=TrainConfig(lr=0.01, epochs=300), seed=0)
    pred = predict_batch(model, src.user_idx, src.item_idx)
    assert float(np.sqrt(np.mean((pred - src.rating) ** 2))) < 0.05


def test_synthetic_rejects_infeasible_specs():
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(n_overlap=500), seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(ratings_per_user=10_000), seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(noise_sd=-0.1), seed=0)
    with pytest.raises(ValueError):
        generate_synthetic(SyntheticSpec(bridge_family="cubic"), seed=0)


def test_zero_overlap_world_cannot_run():
    spec = SyntheticSpec(**{**SMALL, "n_overlap": 0})
    with pytest.raises(ValueError, match="overlap"):
        run_cold(_plan(spec, "ptupcdr"))


# ---------------------------------------------------------------------------
# cold stage

def test_run_cold_is_deterministic():
    spec = SyntheticSpec(**SMALL)
    a = run_cold(_plan(spec, "ptupcdr"))
    b = run_cold(_plan(spec, "ptupcdr"))
    assert a.report.mae == b.report.mae and a.report.rmse == b.report.rmse
    for u in a.init:
        np.testing.assert_array_equal(a.init[u], b.init[u])


def test_cold_shared_map_is_recovered_by_both_bridge_methods():
    spec = SyntheticSpec(**SMALL, noise_sd=0.0, bridge_family="shared_linear")
    for method in ("emcdr", "ptupcdr"):
        report = run_cold(_plan(spec, method)).report
        assert report.mae < 0.1, f"{method} mae {report.mae}"


def test_cold_personalized_world_orders_the_methods():
    spec = SyntheticSpec(**SMALL, noise_sd=0.0, bridge_family="per_user_linear")
    maes = {m: run_cold(_plan(spec, m)).report.mae
            for m in ("tgt", "emcdr", "ptupcdr")}
    assert maes["ptupcdr"] < maes["emcdr"] < maes["tgt"]


def test_cold_report_counts_evaluated_ratings():
    spec = SyntheticSpec(**SMALL)
    cold = run_cold(_plan(spec, "tgt"))
    expected = sum(len(cold.split.cold[u]) for u in cold.split.test_users)
    assert cold.report.n_eval == expected
    assert cold.report.counters["test_users_missing_source"] == 0


def test_cold_stage_never_reads_warm_rows():
    spec = SyntheticSpec(**SMALL)
    cold = run_cold(_plan(spec, "emcdr"))
    warm_rows = set()
    for u in cold.split.test_users:
        warm_rows |= set(cold.split.warm[u].tolist())
    assert not (warm_rows & set(cold.split.target_train_indices.tolist()))
    for u in cold.split.test_users:
        assert not (warm_rows & set(cold.split.cold[u].tolist()))


# ---------------------------------------------------------------------------
# warm stage

def test_warm_zero_epochs_equals_cold_initialization():
    spec = SyntheticSpec(**SMALL)
    plan = _plan(spec, "ptupcdr", finetune=TrainConfig(lr=0.01, epochs=0))
    cold = run_cold(plan)
    warm = run_warm(plan, cold)
    r, p = [], []
    for u in cold.split.test_users:
        rows = cold.split.warm[u]
        if len(rows) == 0:
            continue
        items = cold.tgt.item_idx[rows]
        r.append(cold.tgt.rating[rows])
        p.append(np.clip(cold.scoring[items] @ cold.init[u], 0.0, 5.0))
    mae, rmse = compute_metrics(np.concatenate(r), np.concatenate(p))
    assert warm.mae == mae and warm.rmse == rmse


def test_warm_improves_over_cold_with_consistent_preferences():
    spec = SyntheticSpec(**SMALL, noise_sd=0.0, bridge_family="per_user_linear")
    for method in ("tgt", "ptupcdr"):
        plan = _plan(spec, method)
        cold = run_cold(plan)
        warm = run_warm(plan, cold)
        assert warm.mae <= cold.report.mae, method


def test_warm_can_unfreeze_item_vectors():
    spec = SyntheticSpec(**SMALL, noise_sd=0.0)
    plan = _plan(spec, "tgt", finetune=TrainConfig(lr=0.01, epochs=30),
                 finetune_items=True)
    warm = run_warm(plan)
    assert np.isfinite(warm.mae)


# ---------------------------------------------------------------------------
# suites

def _fast_suite_spec():
    return SyntheticSpec(n_users_src=60, n_users_tgt=60, n_overlap=40,
                         n_items_src=40, n_items_tgt=40, k_true=3,
                         ratings_per_user=8)


def _fast_plan(method="tgt", seed=0, beta=0.2):
    return ExperimentPlan(task=SyntheticTask(_fast_suite_spec()), method=method,
                          k=3, beta=beta, seed=seed,
                          pretrain=TrainConfig(lr=0.01, epochs=15),
                          bridge=TrainConfig(lr=0.01, epochs=10),
                          finetune=TrainConfig(lr=0.01, epochs=20))


def test_suite_row_counts_and_means():
    plans = sweep_plans(_fast_plan(), methods=["tgt", "emcdr"], seeds=[0, 1, 2])
    rows = run_suite(plans, record_runtime=False)
    per_seed = [r for r in rows if r["seed"] != "mean"]
    means = [r for r in rows if r["seed"] == "mean"]
    assert len(per_seed) == 12  # 2 methods x 3 seeds x 2 stages
    assert len(means) == 4      # one per (method, stage)
    for m in means:
        group = [r for r in per_seed if (r["method"], r["stage"]) == (m["method"], m["stage"])]
        np.testing.assert_allclose(m["mae"], np.mean([g["mae"] for g in group]))


def test_suite_tables_are_byte_identical_across_runs(tmp_path):
    plans = sweep_plans(_fast_plan(), methods=["tgt"], seeds=[0, 1])
    for name in ("a", "b"):
        rows = run_suite(plans, record_runtime=False)
        write_suite_csv(rows, tmp_path / f"{name}.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()


def test_suite_records_failures_and_continues(tmp_path):
    bad = ExperimentPlan(task=AmazonTask(str(tmp_path / "missing_src.csv"),
                                         str(tmp_path / "missing_tgt.csv")),
                         method="tgt")
    rows = run_suite([bad, _fast_plan()], record_runtime=False)
    failed = [r for r in rows if r["stage"] == "failed"]
    ok = [r for r in rows if r["stage"] in ("cold", "warm")]
    assert len(failed) == 1 and "error" in failed[0]
    assert len(ok) == 2


def test_suite_parallel_matches_serial():
    plans = sweep_plans(_fast_plan(), methods=["tgt", "emcdr"], seeds=[0])
    serial = run_suite(plans, parallelism=1, record_runtime=False)
    parallel = run_suite(plans, parallelism=2, record_runtime=False)
    assert serial == parallel


def test_suite_beta_sweep_monotone_for_ptupcdr():
    # fewer training overlap users (larger beta) cannot help the meta stage
    spec = SyntheticSpec(**SMALL, noise_sd=0.1)
    means = []
    for beta in (0.2, 0.5, 0.8):
        maes = [run_cold(_plan(spec, "ptupcdr", seed=s, beta=beta)).report.mae
                for s in (0, 1, 2)]
        means.append(float(np.mean(maes)))
    assert means[0] <= means[1] <= means[2]


@pytest.mark.parametrize("base_model", ["gmf", "two_tower"])
def test_bridge_methods_generalize_across_base_models(base_model):
    spec = SyntheticSpec(**SMALL, noise_sd=0.0, bridge_family="per_user_linear")
    maes = {}
    for method in ("tgt", "emcdr", "ptupcdr"):
        plan = ExperimentPlan(task=SyntheticTask(spec), method=method,
                              base_model=base_model, k=spec.k_true, beta=0.2, seed=0,
                              pretrain=TrainConfig(lr=0.01, epochs=120),
                              bridge=TrainConfig(lr=0.01, epochs=50),
                              finetune=TrainConfig(lr=0.01, epochs=50))
        cold = run_cold(plan)
        warm = run_warm(plan, cold)
        assert warm.mae <= cold.report.mae
        maes[method] = cold.report.mae
    assert maes["emcdr"] < maes["tgt"]
    assert maes["ptupcdr"] < maes["tgt"]


def test_personalized_bridges_halve_common_bridge_mse():
    # on the archetype world the generated bridges reach well under half the
    # common bridge's squared prediction error, averaged over seeds
    spec = SyntheticSpec(n_users_src=260, n_users_tgt=260, n_overlap=200,
                         n_items_src=150, n_items_tgt=150, k_true=6,
                         ratings_per_user=20, noise_sd=0.1,
                         bridge_family="per_user_linear")
    mse = {m: [] for m in ("emcdr", "ptupcdr")}
    for seed in (0, 1, 2):
        for method in mse:
            plan = ExperimentPlan(task=SyntheticTask(spec), method=method, k=6,
                                  beta=0.2, seed=seed,
                                  pretrain=TrainConfig(lr=0.01, epochs=60),
                                  bridge=TrainConfig(lr=0.01, epochs=40))
            mse[method].append(run_cold(plan).report.rmse ** 2)
    assert np.mean(mse["ptupcdr"]) < 0.5 * np.mean(mse["emcdr"])
