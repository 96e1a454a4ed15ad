import json

import numpy as np
import pytest

from smora.numerics import child_rng, make_rng
from smora.training import (
    LoraUnit,
    SmoraUnit,
    TaskGenSpec,
    TrainConfig,
    TrainingDiverged,
    build_model,
    enumerate_granularity_configs,
    evaluate,
    gen_multitask_data,
    granularity_sweep,
    rank_ablation,
    train_adapter,
    write_ablation_csv,
    write_sweep_csv,
)
from smora.adapter import LoraParams, smora_backward, smora_forward
from smora.training import Model


def small_spec(**kw):
    base = dict(
        m=2, d_in=8, d_out=8, teacher_rank=2, shared_fraction=0.5,
        noise_std=0.01, train_per_task=64, eval_per_task=32,
    )
    base.update(kw)
    return TaskGenSpec(**base)


def quick_config(**kw):
    base = dict(adapter="lora", r=4, lr=0.05, steps=20, batch_size=16, seed=0)
    base.update(kw)
    return TrainConfig(**base)


class TestDataGeneration:
    def test_deterministic_per_seed(self):
        s1 = gen_multitask_data(small_spec(), child_rng(3, "suite"))
        s2 = gen_multitask_data(small_spec(), child_rng(3, "suite"))
        np.testing.assert_array_equal(s1.w0, s2.w0)
        for t1, t2 in zip(s1.tasks, s2.tasks):
            np.testing.assert_array_equal(t1.x_train, t2.x_train)
            np.testing.assert_array_equal(t1.y_train, t2.y_train)
            np.testing.assert_array_equal(t1.delta, t2.delta)

    def test_noiseless_samples_satisfy_teacher_exactly(self):
        suite = gen_multitask_data(small_spec(m=1, noise_std=0.0), make_rng(0))
        task = suite.tasks[0]
        teacher = suite.w0 + task.delta
        np.testing.assert_array_equal(task.y_train, task.x_train @ teacher.T)
        np.testing.assert_array_equal(task.y_eval, task.x_eval @ teacher.T)

    def test_full_sharing_makes_deltas_identical(self):
        suite = gen_multitask_data(small_spec(m=2, shared_fraction=1.0), make_rng(1))
        np.testing.assert_array_equal(suite.tasks[0].delta, suite.tasks[1].delta)

    def test_zero_sharing_makes_deltas_differ(self):
        suite = gen_multitask_data(small_spec(m=2, shared_fraction=0.0), make_rng(1))
        assert not np.allclose(suite.tasks[0].delta, suite.tasks[1].delta)

    def test_task_means_separate_tasks(self):
        suite = gen_multitask_data(small_spec(task_mean_scale=3.0), make_rng(2))
        mu0 = suite.tasks[0].x_train.mean(axis=0)
        mu1 = suite.tasks[1].x_train.mean(axis=0)
        assert np.linalg.norm(mu0 - mu1) > 1.0

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            small_spec(m=0)
        with pytest.raises(ValueError):
            small_spec(shared_fraction=1.5)
        with pytest.raises(ValueError):
            small_spec(train_per_task=0)


class TestEvaluate:
    def test_perfect_teacher_leaves_noise_floor(self):
        spec = small_spec(m=1, noise_std=0.1, eval_per_task=512)
        suite = gen_multitask_data(spec, make_rng(5))
        task = suite.tasks[0]
        # adapter that exactly reproduces the teacher delta: a = delta, b = I
        teacher_unit = LoraUnit(
            suite.w0.copy(),
            LoraParams(a=task.delta.copy(), b=np.eye(spec.d_out)),
        )
        res = evaluate(Model([teacher_unit], "linear"), suite)
        assert res.avg == pytest.approx(0.1**2, rel=0.10)

    def test_zero_adapter_matches_delta_induced_error(self):
        spec = small_spec(noise_std=0.0)
        suite = gen_multitask_data(spec, make_rng(6))
        zero_unit = LoraUnit(suite.w0.copy(), LoraParams.init(2, spec.d_in, spec.d_out, make_rng(0)))
        res = evaluate(Model([zero_unit], "linear"), suite)
        for task, got in zip(suite.tasks, res.per_task):
            expected = float(np.mean((task.x_eval @ task.delta.T) ** 2))
            assert got == pytest.approx(expected, abs=1e-12)

    def test_empty_task_rejected(self):
        suite = gen_multitask_data(small_spec(), make_rng(7))
        suite.tasks[0].x_eval = suite.tasks[0].x_eval[:0]
        unit = LoraUnit(suite.w0.copy(), LoraParams.init(2, 8, 8, make_rng(0)))
        with pytest.raises(ValueError):
            evaluate(Model([unit], "linear"), suite)


class TestTrainAdapter:
    def test_zero_lr_leaves_params_and_loss_flat(self):
        suite = gen_multitask_data(small_spec(), make_rng(8))
        cfg = quick_config(lr=0.0, steps=5)
        model, metrics = train_adapter(suite, cfg)
        fresh = build_model(suite, cfg)
        np.testing.assert_array_equal(model.units[0].lora.a, fresh.units[0].lora.a)
        np.testing.assert_array_equal(model.units[0].lora.b, fresh.units[0].lora.b)
        # no learning: every step's loss is the untrained model's loss on that batch
        x_all, y_all, _ = suite.train_arrays()
        batch_rng = child_rng(cfg.seed, "batches")
        for step_loss in metrics.losses:
            ids = batch_rng.integers(0, x_all.shape[0], size=cfg.batch_size)
            err = fresh.predict(x_all[ids]) - y_all[ids]
            assert step_loss == float(np.mean(err * err))

    def test_lora_converges_on_single_noiseless_task(self):
        # seed-pinned convergence run: rho=2 <= r=4
        spec = small_spec(m=1, d_in=16, d_out=16, noise_std=0.0, train_per_task=256)
        suite = gen_multitask_data(spec, child_rng(0, "suite"))
        cfg = TrainConfig(adapter="lora", r=4, lr=0.2, steps=2000, batch_size=32, seed=0)
        _, metrics = train_adapter(suite, cfg)
        assert metrics.avg_mse < 1e-3

    def test_base_weight_frozen(self, suite):
        cfg = quick_config(adapter="smora", r=8, k=2, steps=15, balancing=True)
        model = build_model(suite, cfg)
        w0_before = model.units[0].layer.w0.copy()
        trained, _ = train_adapter(suite, cfg)
        np.testing.assert_array_equal(trained.units[0].layer.w0, w0_before)
        np.testing.assert_array_equal(trained.units[0].layer.w0, suite.w0)

    def test_identical_seeds_identical_metrics(self, suite):
        cfg = quick_config(adapter="smora", r=8, k=2, steps=10, balancing=True)
        _, m1 = train_adapter(suite, cfg)
        _, m2 = train_adapter(suite, cfg)
        assert m1.to_json_str() == m2.to_json_str()

    def test_divergence_aborts_with_diagnostic(self, suite):
        cfg = quick_config(adapter="lora", r=8, lr=1e6, steps=200)
        with pytest.raises(TrainingDiverged):
            train_adapter(suite, cfg)

    def test_balancing_neutral_when_routing_uniform(self, suite):
        # k = r: every token selects all ranks, counts are uniform every step,
        # so the bias never moves
        cfg = quick_config(adapter="smora", r=8, k=8, steps=12, balancing=True)
        model, metrics = train_adapter(suite, cfg)
        np.testing.assert_array_equal(model.units[0].layer.router.bias, np.zeros(8))
        assert all(mv == 0.0 for mv in metrics.max_vio_history)

    def test_routing_history_recorded(self, suite):
        cfg = quick_config(adapter="smora", r=8, k=2, steps=9)
        _, metrics = train_adapter(suite, cfg)
        assert len(metrics.losses) == 9
        assert len(metrics.max_vio_history) == 9
        assert len(metrics.counts_history) == 9
        assert all(sum(c) == cfg.batch_size * cfg.k for c in metrics.counts_history)
        assert metrics.final_max_vio is not None

    def test_moe_topk_counts_and_balancing(self, suite):
        cfg = quick_config(adapter="moe_topk", n_experts=4, expert_rank=2, top_m=2,
                           steps=10, balancing=True, update_rate=0.05)
        model, metrics = train_adapter(suite, cfg)
        assert len(metrics.counts_history) == 10
        assert all(sum(c) == cfg.batch_size * 2 for c in metrics.counts_history)

    def test_windowed_balance_cadence_matches_manual_updates(self, suite):
        # balance_every=3 must apply one bias step from each 3-step window
        cfg = quick_config(adapter="smora", r=8, k=2, steps=9, balancing=True,
                           update_rate=0.05, balance_every=3)
        model, metrics = train_adapter(suite, cfg)
        bias = np.zeros(8)
        for w in range(3):
            window_counts = np.sum(metrics.counts_history[3 * w : 3 * w + 3], axis=0)
            bias += 0.05 * np.sign(window_counts.mean() - window_counts)
        np.testing.assert_allclose(model.units[0].layer.router.bias, bias, atol=1e-12)

    def test_balance_every_validation(self):
        with pytest.raises(ValueError):
            quick_config(balance_every=0)

    def test_adam_optimizer_runs(self, suite):
        cfg = quick_config(adapter="lora", optimizer="adam", lr=0.01, steps=10)
        _, metrics = train_adapter(suite, cfg)
        assert np.isfinite(metrics.avg_mse)

    def test_mlp_arch_trains_all_kinds(self, suite):
        for adapter in ("lora", "smora", "moe_topk", "moe_soft"):
            cfg = quick_config(adapter=adapter, r=8, k=2, n_experts=4, expert_rank=2,
                               arch="mlp", steps=5)
            model, metrics = train_adapter(suite, cfg)
            assert len(model.units) == 2
            assert np.isfinite(metrics.avg_mse)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            quick_config(adapter="unknown")
        with pytest.raises(ValueError):
            quick_config(adapter="smora", r=4, k=5)
        with pytest.raises(ValueError):
            quick_config(lr=-1.0)
        with pytest.raises(ValueError):
            quick_config(adapter="moe_topk", n_experts=2, top_m=3)


class TestBatchedBackwardAgainstPerToken:
    def test_smora_unit_grads_match_per_token_sum(self, rng):
        cfg = quick_config(adapter="smora", r=6, k=2)
        layer_rng = make_rng(31)
        unit = SmoraUnit.init(layer_rng.standard_normal((5, 7)) , quick_config(adapter="smora", r=6, k=2), layer_rng)
        unit.layer.lora.b = layer_rng.standard_normal((5, 6))
        x = rng.standard_normal((9, 7))
        dy = rng.standard_normal((9, 5))
        _, cache = unit.forward_batch(x)
        grads, dx = unit.backward_batch(cache, dy)
        d_a = np.zeros_like(unit.layer.lora.a)
        d_b = np.zeros_like(unit.layer.lora.b)
        d_wg = np.zeros_like(unit.layer.router.w_g)
        for i in range(9):
            _, c = smora_forward(unit.layer, x[i])
            g = smora_backward(unit.layer, c, dy[i])
            d_a += g.d_a
            d_b += g.d_b
            d_wg += g.d_wg
            np.testing.assert_allclose(dx[i], g.d_x, atol=1e-12)
        np.testing.assert_allclose(grads["a"], d_a, atol=1e-12)
        np.testing.assert_allclose(grads["b"], d_b, atol=1e-12)
        np.testing.assert_allclose(grads["w_g"], d_wg, atol=1e-12)


class TestGranularity:
    def test_exact_five_configs_for_64_16(self):
        configs = enumerate_granularity_configs(64, 16)
        assert configs == [(1, 64, 16), (2, 32, 8), (4, 16, 4), (8, 8, 2), (16, 4, 1)]

    def test_full_budget_boundary(self):
        for e, n, a in enumerate_granularity_configs(12, 12):
            assert a == n and e * n == 12

    def test_invalid_budgets_rejected(self):
        with pytest.raises(ValueError):
            enumerate_granularity_configs(8, 16)
        with pytest.raises(ValueError):
            enumerate_granularity_configs(0, 0)

    def test_sweep_rows_and_csv(self, suite, tmp_path):
        base = quick_config(steps=4)
        rows = granularity_sweep(8, 4, suite, base, seeds=(0, 1))
        # configs for (8, 4): (1,8,4), (2,4,2), (4,2,1)
        assert [(r.expert_rank, r.expert_count, r.activate_count) for r in rows[::2]] == [
            (1, 8, 4), (2, 4, 2), (4, 2, 1),
        ]
        assert len(rows) == 6
        path = tmp_path / "sweep.csv"
        write_sweep_csv(path, rows)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "expert_rank,expert_count,activate_count,seed,avg_mse"
        assert len(lines) == 7


class TestRankAblation:
    def test_rows_sorted_and_csv(self, suite, tmp_path):
        base = quick_config(steps=4)
        rows = rank_ablation(suite, 8, [4, 2], base, seeds=(0,))
        assert [(r.method, r.k) for r in rows] == [
            ("smora", 2), ("lora", 2), ("smora", 4), ("lora", 4),
        ]
        path = tmp_path / "ablation.csv"
        write_ablation_csv(path, rows)
        assert path.read_text().splitlines()[0] == "method,k,seed,avg_mse"

    def test_k_above_total_rejected(self, suite):
        with pytest.raises(ValueError):
            rank_ablation(suite, 8, [16], quick_config(), seeds=(0,))

    def test_k_equal_r_runs(self, suite):
        rows = rank_ablation(suite, 4, [4], quick_config(steps=3), seeds=(0,))
        assert all(np.isfinite(r.avg_mse) for r in rows)

    @pytest.mark.slow
    def test_lora_capacity_monotone_in_rank(self, suite):
        # more total rank never hurts the static adapter: rank 64 <= rank 8
        # in at least 4 of 5 seeds
        wins = 0
        for seed in range(5):
            mses = {}
            for r in (8, 64):
                cfg = TrainConfig(adapter="lora", r=r, optimizer="adam", lr=0.01,
                                  steps=800, batch_size=64, seed=seed)
                _, metrics = train_adapter(suite, cfg)
                mses[r] = metrics.avg_mse
            wins += mses[64] <= mses[8]
        assert wins >= 4


class TestMetricsSerialization:
    def test_json_round_trip(self, suite):
        cfg = quick_config(adapter="smora", r=8, k=2, steps=6)
        _, metrics = train_adapter(suite, cfg)
        payload = json.loads(metrics.to_json_str())
        assert len(payload["losses"]) == 6
        assert payload["avg_mse"] == metrics.avg_mse
        assert payload["final_counts"] == metrics.final_counts
