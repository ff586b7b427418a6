import numpy as np
import pytest

from featrestore.data import (
    COMPLETE,
    IMAGE_ONLY,
    MISSING_BOTH,
    TEXT_ONLY,
    SamplePair,
    apply_missing_pattern,
    count_availability,
)
from featrestore.restoration import (
    I2T,
    ROUTING,
    T2I,
    OracleNoisePredictor,
    complete_dataset,
    complete_sample,
    record_trajectory,
    restore_batch,
    restore_feature,
    sample_seed,
)
from featrestore.schedule import build_linear_schedule, make_ddim_plan
from featrestore.training import TrainConfig, init_train_state


@pytest.fixture(scope="module")
def sched():
    return build_linear_schedule(1000)


@pytest.fixture(scope="module")
def plan(sched):
    return make_ddim_plan(sched, 50)


def make_pairs(n, d=8, seed=0):
    rng = np.random.default_rng(seed)
    feats = rng.standard_normal((n, 2, d)).astype(np.float32)
    return [SamplePair(id=f"r{i:04d}", label=i % 2, image_feat=feats[i, 0], text_feat=feats[i, 1])
            for i in range(n)]


class TestRestoreFeature:
    def test_oracle_converges_regardless_of_rng(self, sched, plan):
        rng = np.random.default_rng(0)
        target = rng.standard_normal(16)
        model = OracleNoisePredictor(target, sched)
        for seed in (1, 2, 3):
            out = restore_feature(np.zeros(4), T2I, model, plan, sched,
                                  np.random.default_rng(seed))
            assert np.linalg.norm(out - target) <= 1e-4 * np.linalg.norm(target)

    def test_fixed_seed_bit_identical(self, sched, plan):
        model = OracleNoisePredictor(np.ones(8), sched)
        a = restore_feature(np.zeros(4), I2T, model, plan, sched, np.random.default_rng(7))
        b = restore_feature(np.zeros(4), I2T, model, plan, sched, np.random.default_rng(7))
        assert a.tobytes() == b.tobytes()

    def test_plan_schedule_mismatch(self, sched):
        other = build_linear_schedule(500)
        bad_plan = make_ddim_plan(other, 10)
        model = OracleNoisePredictor(np.ones(8), sched)
        with pytest.raises(ValueError, match="plan"):
            restore_feature(np.zeros(4), I2T, model, bad_plan, sched, np.random.default_rng(0))

    def test_unknown_direction(self, sched, plan):
        model = OracleNoisePredictor(np.ones(8), sched)
        with pytest.raises(ValueError):
            restore_feature(np.zeros(4), "TTI", model, plan, sched, np.random.default_rng(0))

    def test_batch_matches_oracle_target(self, sched, plan):
        rng = np.random.default_rng(4)
        target = rng.standard_normal(8)
        model = OracleNoisePredictor(target, sched)
        out = restore_batch(np.zeros((5, 4)), rng.standard_normal((5, 8)), model, plan, sched)
        np.testing.assert_allclose(out, np.tile(target, (5, 1)), atol=1e-6)


class TestRouting:
    def test_routing_table_exhaustive(self):
        assert set(ROUTING) == {IMAGE_ONLY, TEXT_ONLY}
        assert ROUTING[IMAGE_ONLY] == ("text", "image", I2T)
        assert ROUTING[TEXT_ONLY] == ("image", "text", T2I)

    def test_text_only_runs_t2i(self, sched, plan):
        calls = []

        class SpyState:
            def __init__(self, sched):
                t = np.zeros(8)
                self.model_i2t = OracleNoisePredictor(t, sched)
                self.model_t2i = OracleNoisePredictor(t, sched)
                self.norm_stats = None
                self.sched = sched

        state = SpyState(sched)
        orig = state.model_t2i.predict_noise
        state.model_t2i.predict_noise = lambda *a, **k: (calls.append(1), orig(*a, **k))[1]
        pair = SamplePair(id="x", label=0, image_feat=None,
                          text_feat=np.ones(8, np.float32), availability=TEXT_ONLY)
        out = complete_sample(pair, state, plan, sched, None, np.random.default_rng(0))
        assert len(calls) == plan.count
        assert out.availability == COMPLETE and out.restored == {"image": True, "text": False}


class TestCompleteSample:
    def test_complete_passthrough_no_model_call(self, sched, plan):
        pair = make_pairs(1)[0]

        class Boom:
            model_i2t = model_t2i = property(lambda self: (_ for _ in ()).throw(AssertionError))

        out = complete_sample(pair, Boom(), plan, sched, None, np.random.default_rng(0))
        assert out is pair

    def test_observed_side_untouched(self, sched, plan):
        model = OracleNoisePredictor(np.zeros(8), sched)
        models = {I2T: model, T2I: model}
        pair = SamplePair(id="y", label=1, image_feat=None,
                          text_feat=np.arange(8, dtype=np.float32), availability=TEXT_ONLY)
        out = complete_sample(pair, models, plan, sched, None, np.random.default_rng(1))
        assert out.text_feat.tobytes() == pair.text_feat.tobytes()
        assert out.image_feat is not None and out.image_feat.dtype == np.float32

    def test_restored_matches_oracle_target(self, sched, plan):
        target = np.random.default_rng(5).standard_normal(8)
        models = {I2T: OracleNoisePredictor(target, sched), T2I: OracleNoisePredictor(target, sched)}
        pair = SamplePair(id="z", label=0, image_feat=np.ones(8, np.float32),
                          text_feat=None, availability=IMAGE_ONLY)
        out = complete_sample(pair, models, plan, sched, None, np.random.default_rng(2))
        np.testing.assert_allclose(out.text_feat, target.astype(np.float32), atol=1e-4)


class TestCompleteDataset:
    def test_restoration_count_audit(self, sched):
        # 1000 samples at eta=70 both: 350 + 350 restored, 300 untouched
        plan = make_ddim_plan(sched, 2)  # tiny plan keeps this fast
        samples = apply_missing_pattern(make_pairs(1000, seed=6), 70, MISSING_BOTH, seed=7)
        state = _oracle_state(sched)
        out = complete_dataset(samples, state, plan, seed=8)
        counts = count_availability(out)
        assert counts[COMPLETE] == 1000
        restored_img = sum(1 for s in out if s.restored["image"])
        restored_txt = sum(1 for s in out if s.restored["text"])
        assert restored_img == 350 and restored_txt == 350

    def test_order_independent_per_sample(self, sched):
        plan = make_ddim_plan(sched, 5)
        samples = apply_missing_pattern(make_pairs(20, seed=9), 50, MISSING_BOTH, seed=10)
        state = _oracle_state(sched)
        out1 = {s.id: s for s in complete_dataset(samples, state, plan, seed=11)}
        out2 = {s.id: s for s in complete_dataset(samples[::-1], state, plan, seed=11)}
        for sid, s1 in out1.items():
            s2 = out2[sid]
            assert s1.image_feat.tobytes() == s2.image_feat.tobytes()
            assert s1.text_feat.tobytes() == s2.text_feat.tobytes()

    def test_real_model_roundtrip_shapes(self, sched):
        # end-to-end against an (untrained) GatedDiT pair with normalization stats
        cfg = TrainConfig(d_model=8, depth=1, n_heads=2, n_tokens=2, T=100, tau=10, seed=0)
        state = init_train_state(cfg, d_image=8, d_text=8)
        from featrestore.data import fit_norm_stats
        pairs = make_pairs(20, seed=12)
        state.norm_stats = {"image": fit_norm_stats(pairs, "image"),
                            "text": fit_norm_stats(pairs, "text")}
        plan = make_ddim_plan(state.sched, 10)
        masked = apply_missing_pattern(pairs, 40, MISSING_BOTH, seed=13)
        out = complete_dataset(masked, state, plan, seed=14)
        assert count_availability(out)[COMPLETE] == 20
        for s in out:
            assert s.image_feat.shape == (8,) and s.text_feat.shape == (8,)


class TestSampleSeed:
    def test_stable_and_distinct(self):
        assert sample_seed(1, "a") == sample_seed(1, "a")
        assert sample_seed(1, "a") != sample_seed(2, "a")
        assert sample_seed(1, "a") != sample_seed(1, "b")


class TestRecordTrajectory:
    def test_final_only(self, sched, plan):
        target = np.random.default_rng(15).standard_normal(8)
        model = OracleNoisePredictor(target, sched)
        snaps = record_trajectory(np.zeros(4), I2T, model, plan, sched,
                                  np.random.default_rng(16), capture_at=("final",))
        assert len(snaps) == 1
        direct = restore_feature(np.zeros(4), I2T, model, plan, sched, np.random.default_rng(16))
        assert snaps[0].tobytes() == direct.tobytes()

    def test_all_steps_count(self, sched, plan):
        model = OracleNoisePredictor(np.ones(8), sched)
        snaps = record_trajectory(np.zeros(4), I2T, model, plan, sched,
                                  np.random.default_rng(17), capture_at=set(plan.steps.tolist()))
        assert len(snaps) == plan.count + 1

    def test_unknown_step_rejected(self, sched, plan):
        model = OracleNoisePredictor(np.ones(8), sched)
        with pytest.raises(ValueError, match="not in plan"):
            record_trajectory(np.zeros(4), I2T, model, plan, sched,
                              np.random.default_rng(18), capture_at={1234})

    def test_oracle_distance_monotone(self, sched, plan):
        target = np.random.default_rng(19).standard_normal(8)
        model = OracleNoisePredictor(target, sched)
        snaps = record_trajectory(np.zeros(4), I2T, model, plan, sched,
                                  np.random.default_rng(20), capture_at=set(plan.steps.tolist()))
        dists = [np.linalg.norm(s - target) for s in snaps]
        assert all(b <= a + 1e-12 for a, b in zip(dists[:-1], dists[1:]))


def _oracle_state(sched):
    from types import SimpleNamespace
    target = np.zeros(8)
    return SimpleNamespace(model_i2t=OracleNoisePredictor(target, sched),
                           model_t2i=OracleNoisePredictor(target, sched),
                           norm_stats=None, sched=sched)
