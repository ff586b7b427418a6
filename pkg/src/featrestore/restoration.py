"""Inference: fill a sample's missing modality by running the matching
direction model through a DDIM plan from Gaussian noise.

Routing is availability-driven: an image_only sample is missing its text
features, so the text-restoring (I2T, image-conditioned) model runs;
text_only symmetrically runs T2I. Observed features are never modified.
Per-sample determinism comes from deriving each sample's RNG seed from
(global seed, sample id) with a stable hash.
"""

from __future__ import annotations

import hashlib
from types import SimpleNamespace

import numpy as np

from . import autodiff as ad
from .data import COMPLETE, IMAGE_ONLY, TEXT_ONLY, SamplePair, denormalize, normalize
from .schedule import DdimPlan, NoiseSchedule, ddim_step, estimate_x0

I2T = "I2T"  # image condition -> text features
T2I = "T2I"  # text condition -> image features

# availability -> (missing modality, condition modality, direction)
ROUTING = {
    IMAGE_ONLY: ("text", "image", I2T),
    TEXT_ONLY: ("image", "text", T2I),
}


def sample_seed(global_seed: int, sample_id: str) -> int:
    """Stable per-sample seed (Python's hash() is salted per process)."""
    digest = hashlib.sha256(f"{global_seed}:{sample_id}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def _check_plan(plan: DdimPlan, sched: NoiseSchedule) -> None:
    if plan.steps[-1] != sched.T - 1 or plan.steps[0] < 0:
        raise ValueError(
            f"plan (last step {plan.steps[-1]}) does not match schedule with T={sched.T}")


def _step_pairs(plan: DdimPlan):
    desc = plan.steps[::-1]
    return list(zip(desc, np.append(desc[1:], -1)))


def restore_feature(available, direction: str, model, plan: DdimPlan,
                    sched: NoiseSchedule, rng: np.random.Generator) -> np.ndarray:
    """Run the full reverse plan for one sample; returns the clean estimate.

    ``available`` is the conditioning feature in the model's input scale
    (normalized when the checkpoint was trained with normalization).
    """
    if direction not in (I2T, T2I):
        raise ValueError(f"unknown direction {direction!r}")
    _check_plan(plan, sched)
    cond = np.asarray(available, dtype=np.float64).reshape(1, 1, -1)
    x = rng.standard_normal((1, model.cfg.d_feature))
    with ad.no_grad():
        for t, t_prev in _step_pairs(plan):
            eps_hat = model.predict_noise(x, int(t), cond).data
            x = ddim_step(x, eps_hat, int(t), int(t_prev), sched)
    return x[0]


def restore_batch(conds: np.ndarray, x_T: np.ndarray, model, plan: DdimPlan,
                  sched: NoiseSchedule) -> np.ndarray:
    """Vectorized plan iteration for many samples sharing one direction model."""
    _check_plan(plan, sched)
    x = np.asarray(x_T, dtype=np.float64)
    cond = np.asarray(conds, dtype=np.float64)[:, None, :]
    t_col = np.empty(x.shape[0], dtype=np.int64)
    with ad.no_grad():
        for t, t_prev in _step_pairs(plan):
            t_col[:] = t
            eps_hat = model.predict_noise(x, t_col, cond).data
            x = ddim_step(x, eps_hat, int(t), int(t_prev), sched)
    return x


def _direction_model(models, direction: str):
    if hasattr(models, "model_i2t"):
        return models.model_i2t if direction == I2T else models.model_t2i
    return models[direction]


def complete_sample(pair: SamplePair, models, plan: DdimPlan, sched: NoiseSchedule,
                    stats, rng: np.random.Generator) -> SamplePair:
    """Fill the missing side of one sample; complete pairs pass through untouched."""
    pair.validate()
    if pair.availability == COMPLETE:
        return pair
    missing, cond_mod, direction = ROUTING[pair.availability]
    cond = np.asarray(pair.feat(cond_mod), dtype=np.float64)
    if stats is not None:
        cond = normalize(cond, stats[cond_mod])
    model = _direction_model(models, direction)
    restored = restore_feature(cond, direction, model, plan, sched, rng)
    if stats is not None:
        restored = denormalize(restored, stats[missing])
    restored = restored.astype(np.float32)
    fields = {
        "id": pair.id, "label": pair.label, "availability": COMPLETE,
        "restored": dict(pair.restored, **{missing: True}),
        "image_feat": pair.image_feat, "text_feat": pair.text_feat,
    }
    fields[f"{missing}_feat"] = restored
    return SamplePair(**fields)


def complete_dataset(samples, state, plan: DdimPlan, seed: int,
                     batch_size: int = 256) -> list:
    """Restore every incomplete sample against a frozen train state.

    Each sample's starting noise comes from its own seeded generator, so the
    output is independent of dataset order; the plan itself is shared.
    """
    out = list(samples)
    for availability, (missing, cond_mod, direction) in ROUTING.items():
        idxs = [i for i, s in enumerate(samples) if s.availability == availability]
        model = _direction_model(state, direction)
        stats = state.norm_stats
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo:lo + batch_size]
            conds, noises = [], []
            for i in chunk:
                s = samples[i]
                cond = np.asarray(s.feat(cond_mod), dtype=np.float64)
                if stats is not None:
                    cond = normalize(cond, stats[cond_mod])
                conds.append(cond)
                srng = np.random.default_rng(sample_seed(seed, s.id))
                noises.append(srng.standard_normal(model.cfg.d_feature))
            restored = restore_batch(np.stack(conds), np.stack(noises), model, plan, state.sched)
            for row, i in enumerate(chunk):
                s = samples[i]
                feat = restored[row]
                if stats is not None:
                    feat = denormalize(feat, stats[missing])
                fields = {
                    "id": s.id, "label": s.label, "availability": COMPLETE,
                    "restored": dict(s.restored, **{missing: True}),
                    "image_feat": s.image_feat, "text_feat": s.text_feat,
                }
                fields[f"{missing}_feat"] = feat.astype(np.float32)
                out[i] = SamplePair(**fields)
    return out


def record_trajectory(available, direction: str, model, plan: DdimPlan,
                      sched: NoiseSchedule, rng: np.random.Generator,
                      capture_at=()) -> list:
    """Snapshots of intermediate states at requested plan steps plus the final
    clean estimate (always captured; the token "final" is accepted and ignored)."""
    _check_plan(plan, sched)
    requested = {s for s in capture_at if s != "final"}
    plan_set = set(int(s) for s in plan.steps)
    bad = requested - plan_set
    if bad:
        raise ValueError(f"capture steps not in plan: {sorted(bad)}")
    cond = np.asarray(available, dtype=np.float64).reshape(1, 1, -1)
    x = rng.standard_normal((1, model.cfg.d_feature))
    snapshots = []
    with ad.no_grad():
        for t, t_prev in _step_pairs(plan):
            if int(t) in requested:
                snapshots.append(x[0].copy())
            eps_hat = model.predict_noise(x, int(t), cond).data
            x = ddim_step(x, eps_hat, int(t), int(t_prev), sched)
    snapshots.append(x[0].copy())
    return snapshots


class OracleNoisePredictor:
    """Closed-form predictor aimed at a fixed target; for diagnostics and tests.

    With this predictor every clean estimate equals the target exactly, so a
    full plan must land on the target regardless of the starting noise.
    """

    def __init__(self, target, sched: NoiseSchedule):
        self.target = np.asarray(target, dtype=np.float64)
        self.sched = sched
        self.cfg = SimpleNamespace(d_feature=self.target.shape[-1])

    def predict_noise(self, x_t, t, cond, capture=None):
        x = np.atleast_2d(x_t.data if isinstance(x_t, ad.Tensor) else np.asarray(x_t))
        abar = self.sched.alpha_bar[np.atleast_1d(t)][:, None]
        return ad.Tensor((x - np.sqrt(abar) * self.target) / np.sqrt(1.0 - abar))
