import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from latent_refine import bench
from latent_refine.core import MODES, RefinementConfig
from latent_refine.dynamics import CheckpointPair
from latent_refine.engine import evaluate
from latent_refine.tasks import gen_dag_reach, gen_mod_chain
from latent_refine.train import TrainConfig


@pytest.fixture(scope="module")
def arm():
    return bench.build_oracle_arm(bench.OracleArmConfig(n_instances=200))


def test_calibration_lands_in_band(arm):
    assert 55.0 <= arm.baseline_accuracy <= 75.0
    assert bench.accuracy_of(arm.testset, arm.model, arm.pair, RefinementConfig(mode="none")) == arm.baseline_accuracy


def test_tallies_agree(arm):
    trajs = evaluate(arm.testset, arm.model, arm.pair, RefinementConfig(alpha=0.1, eta=3.0))
    assert bench.batch_accuracy(trajs) == bench.streaming_accuracy(trajs)


class TestAblation:
    def test_structure_and_gain(self, arm):
        rep = bench.run_ablation(arm.testset, arm.model, arm.pair, arm.config.refinement, seeds=(0, 1))
        assert [r.mode for r in rep.rows] == list(MODES)
        assert rep.row("none").gain_pct == 0.0 and rep.row("none").delta == 0.0
        base = rep.accuracy("none")
        for r in rep.rows:
            assert 0 <= r.accuracy <= 100
            assert r.gain_pct == pytest.approx((r.accuracy - base) / base * 100)
            assert len(r.per_seed) == 2
        assert rep.accuracy("both") > rep.accuracy("none")

    def test_inert_refinement(self, arm):
        same = CheckpointPair(arm.model, arm.model)
        rep = bench.run_ablation(arm.testset, arm.model, same, RefinementConfig(alpha=0.0, eta=5.0), seeds=(0,))
        assert len({r.accuracy for r in rep.rows}) == 1

    def test_csv_roundtrip(self, arm, tmp_path):
        rep = bench.run_ablation(arm.testset[:50], arm.model, arm.pair, arm.config.refinement, seeds=(3, 4))
        back = bench.AblationReport.from_csv(rep.to_csv(tmp_path / "a.csv"))
        assert back == rep

    def test_merge(self, arm):
        a = bench.run_ablation(arm.testset[:40], arm.model, arm.pair, arm.config.refinement, seeds=(0,))
        b = bench.run_ablation(arm.testset[:40], arm.model, arm.pair, arm.config.refinement, seeds=(1,))
        m = bench.merge_ablations([a, b])
        assert m.seeds == (0, 1)
        assert m.accuracy("both") == pytest.approx((a.accuracy("both") + b.accuracy("both")) / 2)

    def test_validation(self, arm):
        with pytest.raises(ValueError):
            bench.run_ablation([], arm.model, arm.pair, RefinementConfig())
        with pytest.raises(ValueError):
            bench.run_ablation(arm.testset, arm.model, arm.pair, RefinementConfig(), seeds=())


class TestSweep:
    def test_single_cell_matches_direct_eval(self, arm):
        grid = bench.run_sweep(arm.testset, arm.model, arm.pair, [0.4], [2.0], rounds_R=3)
        cfg = RefinementConfig(alpha=0.4, eta=2.0, mode="both", rounds_R=3, round_policy="per_query")
        assert grid.accuracy[0, 0] == bench.accuracy_of(arm.testset, arm.model, arm.pair, cfg)

    def test_five_by_five_csv(self, arm, tmp_path):
        etas = bench.default_eta_grid(arm.model.dim)
        grid = bench.run_sweep(arm.testset[:60], arm.model, arm.pair, bench.default_alpha_grid(), etas)
        path = grid.to_csv(tmp_path / "s.csv")
        with path.open() as fh:
            assert len(list(csv.DictReader(fh))) == 25
        back = bench.SweepGrid.from_csv(path)
        assert back.alphas == grid.alphas and back.etas == grid.etas
        np.testing.assert_array_equal(back.accuracy, grid.accuracy)

    def test_eta_grid_dynamic_range(self):
        etas = bench.default_eta_grid(64)
        assert etas[-1] / etas[0] == pytest.approx(5000)
        assert etas[-1] == 32.0

    @pytest.mark.parametrize("alphas, etas", [([], [1.0]), ([0.5], []), ([0.0], [1.0]), ([0.5], [100.0])])
    def test_validation(self, arm, alphas, etas):
        with pytest.raises(ValueError):
            bench.run_sweep(arm.testset[:5], arm.model, arm.pair, alphas, etas)

    def test_missing_cell_rejected(self):
        with pytest.raises(ValueError):
            bench.SweepGrid([0.1, 0.2], [1.0], np.array([[1.0], [np.nan]]))


class TestTokens:
    def test_known_count(self):
        rep = bench.run_token_report(gen_mod_chain(50, chain_len=6, seed=0), tokens_per_step=10)
        r = rep.row("mod_chain")
        assert (r.mean_cot, r.mean_latent, r.mean_markers) == (61.0, 1.0, 3.0)
        assert r.reduction_pct > 98.0

    @given(st.floats(0, 1e4), st.floats(0, 1e4))
    def test_reduction_rule(self, cot, latent):
        red = bench.token_reduction(cot, latent)
        if cot <= latent:
            assert red == 0.0
        else:
            assert red == pytest.approx((1 - latent / cot) * 100)

    def test_zero_length_rule(self):
        assert bench.token_reduction(1.0, 1.0) == 0.0

    def test_monotone_in_length(self):
        reds = [bench.run_token_report(gen_mod_chain(20, chain_len=n, seed=n)).rows[0].reduction_pct
                for n in range(2, 11)]
        assert all(b > a for a, b in zip(reds, reds[1:]))

    def test_per_family_rows_and_csv(self, tmp_path):
        data = gen_dag_reach(10, seed=0) + gen_mod_chain(10, seed=0)
        rep = bench.run_token_report(data)
        assert [r.family for r in rep.rows] == ["dag_reach", "mod_chain"]
        assert bench.TokenReport.from_csv(rep.to_csv(tmp_path / "t.csv")) == rep


def test_cost_arms(tmp_path):
    data = gen_dag_reach(260, seed=0)
    arm_cfg = bench.MlpArmConfig(
        n_train=200, n_test=60, bad_epoch=1, main_epoch=2, good_epoch=4,
        train=TrainConfig(epochs=4, lr=0.01, batch_size=8, latent_weight=3.0, checkpoint_epochs=(1, 2, 4),
                          dim=16, hidden=32),
    )
    rep = bench.run_cost_arms(data[:200], data[200:], bench.CostConfig(arm_cfg, extra_epochs=2), out_dir=tmp_path)
    assert [r.arm for r in rep.rows] == list(bench.COST_ARMS)
    assert rep.row("baseline").checkpoints_written == 0
    assert rep.row("inference_only").checkpoints_written == 0
    assert rep.row("train_only").checkpoints_written == 1
    assert rep.row("inference_only").wall_time_s < rep.row("train_only").wall_time_s
    assert all(0 <= r.accuracy <= 100 and r.peak_memory_mb > 0 for r in rep.rows)
    assert rep.n_test == 60
    back = bench.CostReport.from_csv(rep.to_csv(tmp_path / "c.csv"))
    assert back == rep
