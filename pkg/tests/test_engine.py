import json
from itertools import product

import numpy as np
import pytest

from latent_refine.core import DimensionError, Featurizer, RefinementConfig, mse
from latent_refine.dynamics import CheckpointPair, IdentityModel, OracleModel, StepContext, make_oracle_arm, model_step
from latent_refine.engine import (
    evaluate, export_traces, export_trajectories, find_flip_cases, run_inference, trace_compare,
)
from latent_refine.tasks import gen_mod_chain


@pytest.fixture(scope="module")
def arm(dag_small):
    feat = Featurizer.create(dag_small[0].width, 64, 0)
    main, pair = make_oracle_arm(feat, noise=0.7, noise_seed=0)
    return feat, main, pair


def test_identity_backend_fixed_point(dag_small):
    feat = Featurizer.create(dag_small[0].width, 64, 0)
    m = IdentityModel(feat, np.zeros((64, 5)))
    traj = run_inference(dag_small[0], m, CheckpointPair(m, m), RefinementConfig(alpha=0.3, eta=2.0))
    h0 = traj.states[0]
    assert all(np.array_equal(h, h0) for h in traj.states)


def test_clean_oracle_reaches_gold(dag_small):
    feat = Featurizer.create(dag_small[0].width, 64, 0)
    m = OracleModel(feat)
    for x in dag_small:
        traj = run_inference(x, m, None, RefinementConfig(mode="none"))
        np.testing.assert_allclose(traj.final_state, feat.embed(x.steps[-1]), atol=1e-12)
        assert traj.correct


def test_both_ends_closer_to_gold(dag_small, arm):
    feat, main, pair = arm
    x = dag_small[1]
    g = feat.embed(x.steps[-1])
    none = run_inference(x, main, pair, RefinementConfig(mode="none"))
    both = run_inference(x, main, pair, RefinementConfig(mode="both", alpha=0.3, eta=8.0))
    assert mse(both.final_state, g) < mse(none.final_state, g)


def test_mode_none_matches_direct_loop(dag_small, small_mlp):
    x = dag_small[0]
    traj = run_inference(x, small_mlp, None, RefinementConfig(mode="none", steps_T=5))
    h = small_mlp.encode(x)
    for t in range(1, 6):
        h = model_step(small_mlp, h, StepContext(x, t, 5))
        assert traj.states[t].tobytes() == h.tobytes()


@pytest.mark.parametrize("alpha", [0.0, 0.25, 0.5, 0.75, 1.0])
def test_residual_displacement(dag_small, small_mlp, alpha):
    traj = run_inference(dag_small[2], small_mlp, None, RefinementConfig(mode="residual", alpha=alpha, steps_T=4))
    for t in range(1, 5):
        prev = traj.states[t - 1]
        lhs = np.linalg.norm(traj.states[t] - prev)
        rhs = (1 - alpha) * np.linalg.norm(model_step(small_mlp, prev) - prev)
        assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("mode, R, T", list(product(["none", "residual", "search", "both"], [1, 2, 3], [1, 2, 3])))
def test_trajectory_shape(dag_small, arm, mode, R, T):
    _, main, pair = arm
    traj = run_inference(dag_small[3], main, pair, RefinementConfig(mode=mode, rounds_R=R, steps_T=T, eta=2.0))
    assert len(traj.states) == T + 1 and len(traj.steps) == T
    for s in traj.steps:
        assert s.residual_applied == (mode in ("residual", "both"))
        assert len(s.searches) == (R if mode in ("search", "both") else 0)


def test_reproducible(dag_small, arm):
    _, main, pair = arm
    cfg = RefinementConfig(alpha=0.2, eta=4.0, rounds_R=2)
    a = json.dumps(run_inference(dag_small[4], main, pair, cfg).to_dict())
    b = json.dumps(run_inference(dag_small[4], main, pair, cfg).to_dict())
    assert a == b


def test_evaluate_parallel_same_order(dag_small, arm):
    _, main, pair = arm
    cfg = RefinementConfig()
    serial = evaluate(dag_small, main, pair, cfg)
    parallel = evaluate(dag_small, main, pair, cfg, workers=4)
    assert [t.instance_id for t in serial] == [t.instance_id for t in parallel]
    assert all(a.final_state.tobytes() == b.final_state.tobytes() for a, b in zip(serial, parallel))


def test_rejects_choice_mismatch(arm):
    _, main, pair = arm
    x = gen_mod_chain(1, n_choices=3, seed=0)[0]
    with pytest.raises(DimensionError):
        run_inference(x, main, pair, RefinementConfig())


def test_rejects_pair_dim_mismatch(dag_small, arm, small_mlp):
    _, main, _ = arm
    with pytest.raises(DimensionError):
        run_inference(dag_small[0], main, CheckpointPair(small_mlp, small_mlp), RefinementConfig())


class TestTrace:
    def test_noop_refinement(self, dag_small, arm):
        _, main, _ = arm
        rec = trace_compare(dag_small[0], main, CheckpointPair(main, main), RefinementConfig(mode="both", alpha=0.0))
        np.testing.assert_array_equal(rec.before.probabilities, rec.after.probabilities)
        assert not rec.flip

    def test_flip_found(self, dag_small, arm, tmp_path):
        _, main, pair = arm
        recs = find_flip_cases(dag_small, main, pair, RefinementConfig(alpha=0.3, eta=8.0), limit=2)
        assert recs
        for r in recs:
            assert r.flip and r.corrected and r.after.predicted == r.gold
            for dist in (r.before, r.after):
                assert abs(dist.probabilities.sum() - 1) <= 1e-9
        doc = json.loads(export_traces(recs, tmp_path / "t.json").read_text())
        assert doc[0]["predicted_after"] == doc[0]["gold"]

    def test_export_trajectories(self, dag_small, arm, tmp_path):
        _, main, pair = arm
        trajs = evaluate(dag_small[:3], main, pair, RefinementConfig())
        lines = export_trajectories(trajs, tmp_path / "t.jsonl").read_text().splitlines()
        assert [json.loads(l)["instance_id"] for l in lines] == [t.instance_id for t in trajs]
