"""Metrics, the downstream probe, and experiment harnesses.

The probe is a deliberately small decoder: the two modality features become
two tokens, pass through two residual self-attention sublayers and one
cross-attention sublayer (text token queries the image token), and a linear
classifier reads the result. It is trained on completed datasets while the
restoration models stay frozen.

Harnesses (single evaluation cells, the missing-rate robustness sweep, the
gating/mutual ablation matrix) derive every cell's RNG streams from the cell
key alone, so any cell can be recomputed in isolation and reproduces its
numbers exactly.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import COMPLETE, SamplePair, apply_missing_pattern, denormalize, normalize
from .model import GatedDiT
from .restoration import complete_dataset
from .schedule import forward_diffuse, make_ddim_plan
from .training import AdamW, TrainConfig, train

ZERO_FILL = "zero_fill"
RESTORED = "restored"

# Table-2-style variant grid: (name, gating, mutual_enabled)
TABLE2_VARIANTS = (
    ("ours", "full", True),
    ("gating", "full", False),
    ("mutual", "base", True),
    ("adaln", "adaln", False),
    ("concat", "concat", False),
    ("base", "base", False),
)


# -- basic metrics ----------------------------------------------------------

def cosine_alignment(restored, truth) -> float:
    """Cosine similarity; zero vectors are defined as 0 with a warning."""
    a = np.asarray(restored, dtype=np.float64)
    b = np.asarray(truth, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        warnings.warn("cosine of a zero vector is defined as 0")
        return 0.0
    return float(a @ b / (na * nb))


def category_similarity_matrix(features, labels, n_classes: int) -> np.ndarray:
    """Cosine similarity between class-mean features; diagonal pinned to 1."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    means = np.stack([x[labels == c].mean(axis=0) for c in range(n_classes)])
    unit = means / np.linalg.norm(means, axis=1, keepdims=True)
    sim = unit @ unit.T
    np.fill_diagonal(sim, 1.0)
    return sim


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    return float((preds == labels).mean())


def macro_f1(preds, labels, n_classes: int) -> float:
    """Unweighted mean of per-class F1; degenerate classes score 0."""
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((preds == c) & (labels == c)))
        fp = int(np.sum((preds == c) & (labels != c)))
        fn = int(np.sum((preds != c) & (labels == c)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        scores.append(2 * precision * recall / (precision + recall) if precision + recall else 0.0)
    return float(np.mean(scores))


# -- gate statistics ----------------------------------------------------------

@dataclass
class GateStats:
    per_block: list  # dicts: block, attn_mean (d,), mlp_mean (d,)
    overall_mean: float
    frac_low: float  # fraction of activations in [0, 0.2]
    histogram: np.ndarray
    bin_edges: np.ndarray
    n_activations: int

    def rows(self):
        out = []
        for rec in self.per_block:
            out.append({"block": rec["block"],
                        "attn_mean": float(rec["attn_mean"].mean()),
                        "mlp_mean": float(rec["mlp_mean"].mean())})
        return out


def gate_statistics(model: GatedDiT, x_t, t, cond, n_bins: int = 20) -> GateStats:
    """Capture every gate activation over one forward batch and summarize."""
    if model.gating != "full":
        raise ValueError(f"gate statistics require the full gating variant, got {model.gating!r}")
    capture = {}
    with ad.no_grad():
        model.predict_noise(x_t, t, cond, capture=capture)
    per_block, flat = [], []
    for rec in capture["gates"]:
        per_block.append({"block": rec["block"],
                          "attn_mean": rec["attn"].mean(axis=0),
                          "mlp_mean": rec["mlp"].mean(axis=0)})
        flat += [rec["attn"].ravel(), rec["mlp"].ravel()]
    values = np.concatenate(flat)
    hist, edges = np.histogram(values, bins=n_bins, range=(0.0, 1.0))
    return GateStats(per_block=per_block, overall_mean=float(values.mean()),
                     frac_low=float((values <= 0.2).mean()), histogram=hist,
                     bin_edges=edges, n_activations=values.size)


def gate_statistics_for_pairs(state, samples, direction: str = "I2T",
                              seed: int = 0, n_bins: int = 20) -> GateStats:
    """Gate statistics on a representative noised batch built from complete pairs."""
    complete = [s for s in samples if s.availability == COMPLETE]
    if not complete:
        raise ValueError("need complete pairs for a gate-statistics batch")
    rng = np.random.default_rng(seed)
    if direction == "I2T":
        model, x_mod, c_mod = state.model_i2t, "text", "image"
    else:
        model, x_mod, c_mod = state.model_t2i, "image", "text"
    x0 = np.stack([np.asarray(s.feat(x_mod), dtype=np.float64) for s in complete])
    cond = np.stack([np.asarray(s.feat(c_mod), dtype=np.float64) for s in complete])
    if state.norm_stats is not None:
        x0 = np.stack([normalize(v, state.norm_stats[x_mod]) for v in x0])
        cond = np.stack([normalize(v, state.norm_stats[c_mod]) for v in cond])
    t = rng.integers(0, state.sched.T, size=len(complete))
    x_t = forward_diffuse(x0, rng.standard_normal(x0.shape), t, state.sched)
    return gate_statistics(model, x_t, t, cond, n_bins=n_bins)


# -- probe -------------------------------------------------------------------

@dataclass
class ProbeConfig:
    d_hidden: int = 64
    n_heads: int = 4
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.01
    n_classes: int | None = None


class ProbeModel:
    """Two self-attention sublayers + one cross-attention sublayer + classifier."""

    def __init__(self, d_image: int, d_text: int, n_classes: int, cfg: ProbeConfig):
        if cfg.d_hidden % cfg.n_heads != 0:
            raise ValueError("d_hidden must be divisible by n_heads")
        self.cfg = cfg
        self.n_classes = n_classes
        rng = np.random.default_rng(cfg.seed)
        d = cfg.d_hidden

        def w(*shape):
            return Tensor(rng.standard_normal(shape) * 0.05, requires_grad=True)

        def zeros(*shape):
            return Tensor(np.zeros(shape), requires_grad=True)

        self.params = {"img_proj.w": w(d_image, d), "img_proj.b": zeros(d),
                       "txt_proj.w": w(d_text, d), "txt_proj.b": zeros(d),
                       "mod_emb": w(2, d)}
        for layer in ("self0", "self1", "cross"):
            self.params[f"{layer}.ln.g"] = Tensor(np.ones(d), requires_grad=True)
            self.params[f"{layer}.ln.b"] = zeros(d)
            for nm in ("wq", "wk", "wv", "wo"):
                self.params[f"{layer}.{nm}"] = w(d, d)
            for nm in ("bq", "bk", "bv", "bo"):
                self.params[f"{layer}.{nm}"] = zeros(d)
        self.params["cls.w"] = w(d, n_classes)
        self.params["cls.b"] = zeros(n_classes)

    def _ln(self, x, layer):
        g, b = self.params[f"{layer}.ln.g"], self.params[f"{layer}.ln.b"]
        mu = x.mean(axis=-1, keepdims=True)
        xc = x - mu
        var = (xc * xc).mean(axis=-1, keepdims=True)
        return (xc / ad.sqrt(var + 1e-6)) * g + b

    def _attn(self, layer, x_q, x_kv):
        P = self.params
        d, H = self.cfg.d_hidden, self.cfg.n_heads
        dh = d // H
        B, Nq, Nk = x_q.shape[0], x_q.shape[1], x_kv.shape[1]

        def heads(v, n):
            return ad.transpose(ad.reshape(v, (B, n, H, dh)), (0, 2, 1, 3))

        q = heads(x_q @ P[f"{layer}.wq"] + P[f"{layer}.bq"], Nq)
        k = heads(x_kv @ P[f"{layer}.wk"] + P[f"{layer}.bk"], Nk)
        v = heads(x_kv @ P[f"{layer}.wv"] + P[f"{layer}.bv"], Nk)
        scores = (q @ ad.transpose(k, (0, 1, 3, 2))) * (1.0 / np.sqrt(dh))
        ctx = ad.softmax(scores, axis=-1) @ v
        ctx = ad.reshape(ad.transpose(ctx, (0, 2, 1, 3)), (B, Nq, d))
        return ctx @ P[f"{layer}.wo"] + P[f"{layer}.bo"]

    def logits(self, img, txt) -> Tensor:
        P = self.params
        img = ad.as_tensor(img)
        txt = ad.as_tensor(txt)
        B = img.shape[0]
        d = self.cfg.d_hidden
        it = ad.reshape(img @ P["img_proj.w"] + P["img_proj.b"], (B, 1, d))
        tt = ad.reshape(txt @ P["txt_proj.w"] + P["txt_proj.b"], (B, 1, d))
        tokens = ad.concat([it, tt], axis=1) + P["mod_emb"]
        for layer in ("self0", "self1"):
            h = self._ln(tokens, layer)
            tokens = tokens + self._attn(layer, h, h)
        img_tok = ad.take(tokens, np.array([0]), axis=1)
        txt_tok = ad.take(tokens, np.array([1]), axis=1)
        out = txt_tok + self._attn("cross", self._ln(txt_tok, "cross"), img_tok)
        return ad.reshape(out, (B, d)) @ P["cls.w"] + P["cls.b"]

    def predict(self, img, txt) -> np.ndarray:
        with ad.no_grad():
            return np.argmax(self.logits(img, txt).data, axis=1)

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def _cross_entropy(logits: Tensor, labels: np.ndarray, n_classes: int) -> Tensor:
    shift = logits.data.max(axis=1, keepdims=True)  # constant shift, softmax grad unchanged
    z = ad.exp(logits - shift)
    lse = ad.log(z.sum(axis=1)) + Tensor(shift[:, 0])
    onehot = np.eye(n_classes)[labels]
    true_logit = (logits * onehot).sum(axis=1)
    return (lse - true_logit).mean()


def probe_arrays(samples, stats):
    """Stack (image, text, label) arrays in probe space (normalized if stats given)."""
    imgs, txts, labels = [], [], []
    for s in samples:
        if s.availability != COMPLETE:
            raise ValueError(f"probe input must be complete, sample {s.id} is {s.availability}")
        img = np.asarray(s.image_feat, dtype=np.float64)
        txt = np.asarray(s.text_feat, dtype=np.float64)
        if stats is not None:
            img = normalize(img, stats["image"])
            txt = normalize(txt, stats["text"])
        imgs.append(img)
        txts.append(txt)
        labels.append(s.label)
    return np.stack(imgs), np.stack(txts), np.asarray(labels)


def train_probe(samples, stats, cfg: ProbeConfig) -> ProbeModel:
    """Fit the probe on a completed dataset; restoration models are untouched."""
    img, txt, labels = probe_arrays(samples, stats)
    n_classes = cfg.n_classes or int(labels.max()) + 1
    probe = ProbeModel(img.shape[1], txt.shape[1], n_classes, cfg)
    opt = AdamW(weight_decay=cfg.weight_decay)
    opt.register(probe.params)
    rng = np.random.default_rng(cfg.seed)
    step = 0
    for _ in range(cfg.epochs):
        order = rng.permutation(len(labels))
        for lo in range(0, len(labels), cfg.batch_size):
            sel = order[lo:lo + cfg.batch_size]
            probe.zero_grad()
            loss = _cross_entropy(probe.logits(img[sel], txt[sel]), labels[sel], n_classes)
            ad.backward(loss)
            step += 1
            opt.update(probe.params, cfg.lr, step)
    return probe


def evaluate_probe(probe: ProbeModel, samples, stats) -> dict:
    img, txt, labels = probe_arrays(samples, stats)
    preds = probe.predict(img, txt)
    return {"accuracy": accuracy(preds, labels),
            "macro_f1": macro_f1(preds, labels, probe.n_classes),
            "n": int(len(labels))}


# -- fill strategies and evaluation cells -------------------------------------

def zero_fill_dataset(samples, stats) -> list:
    """Replace missing features with the normalized-space zero vector."""
    dims = {}
    for modality in ("image", "text"):
        if stats is not None:
            dims[modality] = stats[modality].mean.shape[0]
        else:
            present = next((s.feat(modality) for s in samples if s.feat(modality) is not None), None)
            dims[modality] = None if present is None else present.shape[0]
    out = []
    for s in samples:
        if s.availability == COMPLETE:
            out.append(s)
            continue
        missing = "text" if s.availability == "image_only" else "image"
        if dims[missing] is None:
            raise ValueError(f"cannot infer {missing} dimension for zero fill")
        fill = np.zeros(dims[missing])
        if stats is not None:
            fill = denormalize(fill, stats[missing])
        feats = {"image": s.image_feat, "text": s.text_feat}
        feats[missing] = fill.astype(np.float32)
        out.append(SamplePair(id=s.id, label=s.label, image_feat=feats["image"],
                              text_feat=feats["text"], availability=COMPLETE,
                              restored=dict(s.restored)))
    return out


def _derived_seed(*parts) -> int:
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little")


def restoration_cosines(completed, truth) -> list:
    """Cosine of every synthesized feature against its ground truth."""
    values = []
    for s in completed:
        for modality in ("image", "text"):
            if s.restored.get(modality):
                values.append(cosine_alignment(s.feat(modality), truth[s.id][modality]))
    return values


def evaluate_cell(state, plan, train_samples, test_samples, truth, eta: float,
                  mode: str, seed: int, strategy: str, probe_cfg: ProbeConfig) -> dict:
    """One (eta, mode, seed, strategy) evaluation; self-seeding and order-free."""
    masked_train = apply_missing_pattern(train_samples, eta, mode,
                                         _derived_seed(seed, eta, mode, "train"))
    masked_test = apply_missing_pattern(test_samples, eta, mode,
                                        _derived_seed(seed, eta, mode, "test"))
    cos_values = []
    if strategy == RESTORED:
        completed_train = complete_dataset(masked_train, state, plan,
                                           _derived_seed(seed, eta, mode, "rtrain"))
        completed_test = complete_dataset(masked_test, state, plan,
                                          _derived_seed(seed, eta, mode, "rtest"))
        if truth is not None:
            cos_values = restoration_cosines(completed_test, truth)
    elif strategy == ZERO_FILL:
        completed_train = zero_fill_dataset(masked_train, state.norm_stats)
        completed_test = zero_fill_dataset(masked_test, state.norm_stats)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")

    probe = train_probe(completed_train, state.norm_stats,
                        replace(probe_cfg, seed=_derived_seed(seed, eta, mode, "probe")))
    metrics = evaluate_probe(probe, completed_test, state.norm_stats)
    return {"eta": eta, "mode": mode, "seed": seed, "strategy": strategy,
            "accuracy": metrics["accuracy"], "macro_f1": metrics["macro_f1"],
            "n_test": metrics["n"],
            "cosine_mean": float(np.mean(cos_values)) if cos_values else None,
            "n_restored": len(cos_values)}


# -- reports ------------------------------------------------------------------

@dataclass
class EvalReport:
    kind: str
    config: dict
    rows: list = field(default_factory=list)
    runtime_s: float = 0.0

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.config, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def to_json(self, path) -> None:
        payload = {"kind": self.kind, "config": self.config, "config_hash": self.config_hash,
                   "runtime_s": self.runtime_s, "rows": self.rows}
        Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True, default=str) + "\n")

    def to_csv(self, path) -> None:
        if not self.rows:
            Path(path).write_text("")
            return
        keys = list(self.rows[0].keys())
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=keys)
            writer.writeheader()
            for row in self.rows:
                writer.writerow(row)


def robustness_sweep(state, plan, train_samples, test_samples, truth, etas, modes,
                     seeds, probe_cfg: ProbeConfig,
                     strategies=(RESTORED, ZERO_FILL)) -> EvalReport:
    """Probe metrics across missing rates for restored vs zero-filled data."""
    started = time.time()
    report = EvalReport(kind="robustness_sweep", config={
        "etas": list(etas), "modes": list(modes), "seeds": list(seeds),
        "strategies": list(strategies), "probe": probe_cfg.__dict__,
        "ddim_steps": int(plan.count)})
    for mode in modes:
        for eta in etas:
            for seed in seeds:
                for strategy in strategies:
                    report.rows.append(evaluate_cell(
                        state, plan, train_samples, test_samples, truth,
                        eta, mode, seed, strategy, probe_cfg))
    report.rows.sort(key=lambda r: (r["mode"], r["eta"], r["seed"], r["strategy"]))
    report.runtime_s = time.time() - started
    return report


def ablation_matrix(train_samples, test_samples, truth, base_cfg: TrainConfig,
                    probe_cfg: ProbeConfig, seeds, variants=TABLE2_VARIANTS,
                    eta: float = 70.0, mode: str = "missing_both",
                    ddim_count: int = 50) -> EvalReport:
    """Train every (gating, mutual) variant identically and compare probe metrics."""
    started = time.time()
    report = EvalReport(kind="ablation_matrix", config={
        "variants": [v[0] for v in variants], "seeds": list(seeds), "eta": eta,
        "mode": mode, "train": base_cfg.__dict__, "probe": probe_cfg.__dict__,
        "ddim_steps": ddim_count})
    for name, gating, mutual in variants:
        for seed in seeds:
            cfg = replace(base_cfg, gating=gating, mutual_enabled=mutual, seed=seed)
            state = train(train_samples, cfg)
            plan = make_ddim_plan(state.sched, ddim_count)
            cell = evaluate_cell(state, plan, train_samples, test_samples, truth,
                                 eta, mode, seed, RESTORED, probe_cfg)
            cell.update({"variant": name, "gating": gating,
                         "mutual": mutual, "final_loss": state.history[-1]["loss"] if state.history else None})
            report.rows.append(cell)
    report.rows.sort(key=lambda r: (r["variant"], r["seed"]))
    report.runtime_s = time.time() - started
    return report


# -- PCA diagnostic ------------------------------------------------------------

def pca_fit(features, n_components: int = 2):
    """PCA basis from reference features (mean + top right-singular vectors)."""
    x = np.asarray(features, dtype=np.float64)
    mean = x.mean(axis=0)
    _, _, vt = np.linalg.svd(x - mean, full_matrices=False)
    return {"mean": mean, "components": vt[:n_components]}


def pca_project(features, basis) -> np.ndarray:
    x = np.atleast_2d(np.asarray(features, dtype=np.float64))
    return (x - basis["mean"]) @ basis["components"].T
