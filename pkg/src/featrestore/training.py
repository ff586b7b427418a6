"""Joint training of the two restoration directions.

Both direction models (I2T restores text features from an image condition,
T2I the reverse) are optimized together: each gets a base noise-prediction
MSE, and for batch elements whose sampled timestep falls below the threshold
tau, a bidirectional consistency term is added in which each model's clean
estimate conditions the opposite model. A decoupled-weight-decay adaptive
update (AdamW) is applied to all parameters of both models in one step.

Checkpoints are a single binary file: magic "FRST", version u16, then named
sections (config JSON, schedule tables, normalization stats, parameters per
direction, optimizer moments, RNG state), each length-prefixed and CRC32-
checked. Everything numeric is float64, so save -> load -> save is
byte-identical and resumed runs reproduce the uninterrupted loss sequence.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .data import NormStats, fit_norm_stats, normalize
from .model import GatedDiT, ModelConfig
from .schedule import NoiseSchedule, build_linear_schedule, forward_diffuse

CKPT_MAGIC = b"FRST"
CKPT_VERSION = 1


class TrainingError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    tau: int = 50
    epochs: int = 40
    lr: float = 1e-4
    batch_size: int = 64
    seed: int = 0
    weight_decay: float = 0.01
    grad_clip: float | None = None
    mutual_enabled: bool = True
    base_enabled: bool = True
    detach_mutual: bool = False
    normalize: bool = True
    gating: str = "full"
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 2e-2
    d_model: int = 64
    depth: int = 2
    n_heads: int = 4
    n_tokens: int = 4
    gate_hidden: int = 64

    def validate(self) -> None:
        if not (0 <= self.tau <= self.T):
            raise ValueError(f"need 0 <= tau <= T, got tau={self.tau}, T={self.T}")
        if self.lr <= 0:
            raise ValueError("lr must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("bad batch_size/epochs")


class AdamW:
    """Adaptive moments with decoupled weight decay, float64, fixed update order."""

    def __init__(self, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
        self.beta1, self.beta2, self.eps, self.weight_decay = beta1, beta2, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def register(self, named_params: dict) -> None:
        for name, p in named_params.items():
            self.m[name] = np.zeros_like(p.data)
            self.v[name] = np.zeros_like(p.data)

    def update(self, named_params: dict, lr: float, step: int) -> None:
        """One update using gradients stored on the tensors; ``step`` is 1-based."""
        bc1 = 1.0 - self.beta1 ** step
        bc2 = 1.0 - self.beta2 ** step
        for name, p in named_params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps) + lr * self.weight_decay * p.data


@dataclass
class TrainState:
    model_i2t: GatedDiT
    model_t2i: GatedDiT
    optimizer: AdamW
    rng: np.random.Generator
    step: int
    sched: NoiseSchedule
    cfg: TrainConfig
    norm_stats: dict | None = None
    history: list = field(default_factory=list)

    def named_params(self) -> dict:
        out = {}
        for prefix, model in (("i2t", self.model_i2t), ("t2i", self.model_t2i)):
            for name, p in model.params.items():
                out[f"{prefix}/{name}"] = p
        return out

    def zero_grad(self) -> None:
        self.model_i2t.zero_grad()
        self.model_t2i.zero_grad()


def init_train_state(cfg: TrainConfig, d_image: int, d_text: int,
                     norm_stats: dict | None = None) -> TrainState:
    cfg.validate()
    rng = np.random.default_rng(cfg.seed)
    arch = dict(d_model=cfg.d_model, depth=cfg.depth, n_heads=cfg.n_heads,
                n_tokens=cfg.n_tokens, gate_hidden=cfg.gate_hidden)
    model_i2t = GatedDiT(ModelConfig(d_feature=d_text, d_cond=d_image, **arch),
                         rng=rng, gating=cfg.gating)
    model_t2i = GatedDiT(ModelConfig(d_feature=d_image, d_cond=d_text, **arch),
                         rng=rng, gating=cfg.gating)
    opt = AdamW(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    state = TrainState(model_i2t=model_i2t, model_t2i=model_t2i, optimizer=opt,
                       rng=rng, step=0,
                       sched=build_linear_schedule(cfg.T, cfg.beta_start, cfg.beta_end),
                       cfg=cfg, norm_stats=norm_stats)
    opt.register(state.named_params())
    return state


# -- losses ----------------------------------------------------------------

def _per_sample_mse(target: np.ndarray, pred: Tensor) -> Tensor:
    diff = ad.sub(Tensor(target), pred)
    return (diff * diff).mean(axis=-1)


def _base_per_sample(model, x0, cond, t, eps, sched) -> Tensor:
    x_t = forward_diffuse(x0, eps, t, sched)
    return _per_sample_mse(eps, model.predict_noise(x_t, t, cond))


def base_loss(model, x0, cond, t, eps, sched) -> Tensor:
    """Mean squared error between true and predicted noise, mean over everything."""
    x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
    eps = np.atleast_2d(np.asarray(eps, dtype=np.float64))
    return _base_per_sample(model, x0, cond, np.atleast_1d(t), eps, sched).mean()


def _estimate_x0_tensor(x_t: np.ndarray, pred: Tensor, t, sched) -> Tensor:
    abar = sched.alpha_bar[np.atleast_1d(t)][:, None]
    recon = ad.as_tensor((1.0 / np.sqrt(abar)) * x_t)
    return ad.sub(recon, ad.mul(Tensor(np.sqrt(1.0 / abar - 1.0)), pred))


def _mutual_per_sample(model_i2t, model_t2i, x0_img, x0_txt, t, eps_img, eps_txt,
                       sched, detach=False) -> Tensor:
    x_t_img = forward_diffuse(x0_img, eps_img, t, sched)
    x_t_txt = forward_diffuse(x0_txt, eps_txt, t, sched)
    # clean estimates from the true-condition predictions (Bx1 condition tokens)
    pred_t2i = model_t2i.predict_noise(x_t_img, t, x0_txt)
    pred_i2t = model_i2t.predict_noise(x_t_txt, t, x0_img)
    x0_hat_img = _estimate_x0_tensor(x_t_img, pred_t2i, t, sched)
    x0_hat_txt = _estimate_x0_tensor(x_t_txt, pred_i2t, t, sched)
    if detach:
        x0_hat_img = ad.stop_gradient(x0_hat_img)
        x0_hat_txt = ad.stop_gradient(x0_hat_txt)
    cond_img = ad.reshape(x0_hat_img, (x0_hat_img.shape[0], 1, x0_hat_img.shape[1]))
    cond_txt = ad.reshape(x0_hat_txt, (x0_hat_txt.shape[0], 1, x0_hat_txt.shape[1]))
    term_i2t = _per_sample_mse(eps_txt, model_i2t.predict_noise(x_t_txt, t, cond_img))
    term_t2i = _per_sample_mse(eps_img, model_t2i.predict_noise(x_t_img, t, cond_txt))
    return term_i2t + term_t2i


def mutual_loss(state, x0_img, x0_txt, t, eps_img, eps_txt, sched, tau=None,
                detach=False) -> Tensor:
    """Bidirectional consistency loss; caller must only pass timesteps below tau."""
    tau = state.cfg.tau if tau is None else tau
    t = np.atleast_1d(t)
    if np.any(t >= tau):
        raise TrainingError(f"mutual loss called with t >= tau ({t.max()} >= {tau})")
    ps = _mutual_per_sample(state.model_i2t, state.model_t2i,
                            np.atleast_2d(x0_img), np.atleast_2d(x0_txt), t,
                            np.atleast_2d(eps_img), np.atleast_2d(eps_txt), sched, detach=detach)
    return ps.mean()


def total_loss(state, x0_img, x0_txt, t, eps_img, eps_txt, sched, cfg):
    """Combined objective and a float breakdown for reporting.

    Base terms are batch means; the mutual term is computed only on the
    elements with t < tau and contributes sum/batch. When no element
    triggers, the expression is identical to the mutual-disabled one.
    """
    x0_img = np.atleast_2d(np.asarray(x0_img, dtype=np.float64))
    x0_txt = np.atleast_2d(np.asarray(x0_txt, dtype=np.float64))
    eps_img = np.atleast_2d(eps_img)
    eps_txt = np.atleast_2d(eps_txt)
    t = np.atleast_1d(t)
    B = x0_img.shape[0]

    parts = {"base_i2t": 0.0, "base_t2i": 0.0, "mutual": 0.0, "n_mutual": 0}
    terms = []
    if cfg.base_enabled:
        b_i2t = _base_per_sample(state.model_i2t, x0_txt, x0_img, t, eps_txt, sched).mean()
        b_t2i = _base_per_sample(state.model_t2i, x0_img, x0_txt, t, eps_img, sched).mean()
        parts["base_i2t"] = float(b_i2t.data)
        parts["base_t2i"] = float(b_t2i.data)
        terms += [b_i2t, b_t2i]

    mask = t < cfg.tau
    if cfg.mutual_enabled and np.any(mask):
        idx = np.flatnonzero(mask)
        ps = _mutual_per_sample(state.model_i2t, state.model_t2i,
                                x0_img[idx], x0_txt[idx], t[idx],
                                eps_img[idx], eps_txt[idx], sched,
                                detach=cfg.detach_mutual)
        mut = ps.sum() * (1.0 / B)
        parts["mutual"] = float(mut.data)
        parts["n_mutual"] = int(idx.size)
        terms.append(mut)

    if not terms:
        return Tensor(0.0), parts
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total, parts


# -- the loop ----------------------------------------------------------------

def _batch_arrays(batch, norm_stats, do_normalize):
    imgs, txts = [], []
    for s in batch:
        if s.availability != "complete":
            raise TrainingError(f"training batch contains incomplete sample {s.id}")
        img = np.asarray(s.image_feat, dtype=np.float64)
        txt = np.asarray(s.text_feat, dtype=np.float64)
        if do_normalize and norm_stats is not None:
            img = normalize(img, norm_stats["image"])
            txt = normalize(txt, norm_stats["text"])
        imgs.append(img)
        txts.append(txt)
    return np.stack(imgs), np.stack(txts)


def train_step(state: TrainState, batch, cfg: TrainConfig | None = None,
               sched: NoiseSchedule | None = None):
    """One optimizer step over a batch of complete pairs.

    Draw order (one t per pair, then image noise, then text noise) is fixed
    so that a resumed run consumes the RNG identically.
    """
    cfg = cfg or state.cfg
    sched = sched or state.sched
    if not batch:
        raise TrainingError("empty batch")
    x0_img, x0_txt = _batch_arrays(batch, state.norm_stats, cfg.normalize)
    B = x0_img.shape[0]
    t = state.rng.integers(0, sched.T, size=B)
    eps_img = state.rng.standard_normal(x0_img.shape)
    eps_txt = state.rng.standard_normal(x0_txt.shape)

    state.zero_grad()
    loss, parts = total_loss(state, x0_img, x0_txt, t, eps_img, eps_txt, sched, cfg)
    if not np.isfinite(loss.data):
        raise TrainingError(
            f"non-finite loss at step {state.step}: total={loss.data}, parts={parts}")
    if loss.requires_grad:
        ad.backward(loss)

    params = state.named_params()
    if cfg.grad_clip is not None:
        sq = 0.0
        for p in params.values():
            if p.grad is not None:
                sq += float((p.grad * p.grad).sum())
        gnorm = np.sqrt(sq)
        if gnorm > cfg.grad_clip:
            scale = cfg.grad_clip / gnorm
            for p in params.values():
                if p.grad is not None:
                    p.grad *= scale

    state.step += 1
    state.optimizer.update(params, cfg.lr, state.step)
    report = {"step": state.step, "loss": float(loss.data), **parts}
    return state, report


def train(dataset, cfg: TrainConfig) -> TrainState:
    """Epoch loop over seeded shuffles of the complete pairs."""
    complete = [s for s in dataset if s.availability == "complete"]
    if not complete:
        raise TrainingError("no complete pairs to train on")
    d_image = complete[0].image_feat.shape[0]
    d_text = complete[0].text_feat.shape[0]
    norm_stats = None
    if cfg.normalize:
        norm_stats = {"image": fit_norm_stats(complete, "image"),
                      "text": fit_norm_stats(complete, "text")}
    state = init_train_state(cfg, d_image, d_text, norm_stats=norm_stats)
    n = len(complete)
    for _ in range(cfg.epochs):
        order = state.rng.permutation(n)
        for lo in range(0, n, cfg.batch_size):
            batch = [complete[i] for i in order[lo:lo + cfg.batch_size]]
            _, report = train_step(state, batch, cfg)
            state.history.append(report)
    return state


# -- checkpoint format -------------------------------------------------------

def _pack_tensors(named: dict) -> bytes:
    out = bytearray(struct.pack("<I", len(named)))
    for name, arr in named.items():
        nb = name.encode()
        arr = np.ascontiguousarray(arr, dtype="<f8")
        out += struct.pack("<H", len(nb)) + nb
        out += struct.pack("<B", arr.ndim)
        if arr.ndim:
            out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        raw = arr.tobytes()
        out += struct.pack("<Q", len(raw)) + raw
    return bytes(out)


def _unpack_tensors(payload: bytes, section: str) -> dict:
    try:
        (count,) = struct.unpack_from("<I", payload, 0)
        off = 4
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", payload, off)
            off += 2
            name = payload[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<B", payload, off)
            off += 1
            shape = struct.unpack_from(f"<{ndim}I", payload, off) if ndim else ()
            off += 4 * ndim
            (nbytes,) = struct.unpack_from("<Q", payload, off)
            off += 8
            arr = np.frombuffer(payload[off:off + nbytes], dtype="<f8").reshape(shape)
            if arr.nbytes != nbytes:
                raise CheckpointError(f"short tensor payload in section {section}")
            off += nbytes
            out[name] = arr.astype(np.float64)
        return out
    except struct.error as e:
        raise CheckpointError(f"malformed tensor block in section {section}: {e}") from e


def _write_section(blob: bytearray, name: str, payload: bytes) -> None:
    nb = name.encode()
    blob += struct.pack("<H", len(nb)) + nb
    blob += struct.pack("<QI", len(payload), zlib.crc32(payload))
    blob += payload


def save_checkpoint(state: TrainState, path) -> None:
    path = Path(path)
    config = {
        "train": asdict(state.cfg),
        "model_i2t": asdict(state.model_i2t.cfg),
        "model_t2i": asdict(state.model_t2i.cfg),
        "gating": state.model_i2t.gating,
        "step": state.step,
        "has_norm": state.norm_stats is not None,
    }
    blob = bytearray(CKPT_MAGIC + struct.pack("<H", CKPT_VERSION))
    _write_section(blob, "config", json.dumps(config, sort_keys=True).encode())
    _write_section(blob, "schedule", _pack_tensors({
        "beta": state.sched.beta, "alpha": state.sched.alpha, "alpha_bar": state.sched.alpha_bar}))
    norm = {}
    if state.norm_stats is not None:
        for modality, st in state.norm_stats.items():
            norm[f"{modality}.mean"] = st.mean
            norm[f"{modality}.std"] = st.std
    _write_section(blob, "norm", _pack_tensors(norm))
    _write_section(blob, "params_i2t", _pack_tensors(state.model_i2t.state_arrays()))
    _write_section(blob, "params_t2i", _pack_tensors(state.model_t2i.state_arrays()))
    _write_section(blob, "adam_m", _pack_tensors(state.optimizer.m))
    _write_section(blob, "adam_v", _pack_tensors(state.optimizer.v))
    _write_section(blob, "rng", json.dumps(state.rng.bit_generator.state, sort_keys=True).encode())
    path.write_bytes(bytes(blob))


def _read_sections(raw: bytes, path) -> dict:
    if len(raw) < 6 or raw[:4] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint")
    (version,) = struct.unpack_from("<H", raw, 4)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 6
    sections = {}
    while off < len(raw):
        try:
            (nlen,) = struct.unpack_from("<H", raw, off)
            off += 2
            name = raw[off:off + nlen].decode()
            off += nlen
            plen, crc = struct.unpack_from("<QI", raw, off)
            off += 12
        except (struct.error, UnicodeDecodeError) as e:
            raise CheckpointError(f"{path}: truncated section header") from e
        payload = raw[off:off + plen]
        if len(payload) != plen:
            raise CheckpointError(f"{path}: truncated payload in section {name!r}")
        if zlib.crc32(payload) != crc:
            raise CheckpointError(f"{path}: CRC mismatch in section {name!r}")
        sections[name] = payload
        off += plen
    return sections


def load_checkpoint(path) -> TrainState:
    path = Path(path)
    sections = _read_sections(path.read_bytes(), path)
    required = ("config", "schedule", "norm", "params_i2t", "params_t2i",
                "adam_m", "adam_v", "rng")
    for name in required:
        if name not in sections:
            raise CheckpointError(f"{path}: missing section {name!r}")

    config = json.loads(sections["config"])
    cfg = TrainConfig(**config["train"])
    sched_arrays = _unpack_tensors(sections["schedule"], "schedule")
    sched = NoiseSchedule(T=len(sched_arrays["beta"]), beta=sched_arrays["beta"],
                          alpha=sched_arrays["alpha"], alpha_bar=sched_arrays["alpha_bar"])

    models = {}
    for key in ("model_i2t", "model_t2i"):
        mcfg = ModelConfig(**config[key])
        model = GatedDiT(mcfg, rng=np.random.default_rng(0), gating=config["gating"])
        model.load_arrays(_unpack_tensors(sections["params_" + key[6:]], key))
        models[key] = model

    norm_arrays = _unpack_tensors(sections["norm"], "norm")
    norm_stats = None
    if config["has_norm"]:
        norm_stats = {}
        for modality in ("image", "text"):
            norm_stats[modality] = NormStats(mean=norm_arrays[f"{modality}.mean"],
                                             std=norm_arrays[f"{modality}.std"])

    opt = AdamW(cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay)
    opt.m = _unpack_tensors(sections["adam_m"], "adam_m")
    opt.v = _unpack_tensors(sections["adam_v"], "adam_v")

    rng = np.random.default_rng()
    rng.bit_generator.state = json.loads(sections["rng"])

    state = TrainState(model_i2t=models["model_i2t"], model_t2i=models["model_t2i"],
                       optimizer=opt, rng=rng, step=int(config["step"]),
                       sched=sched, cfg=cfg, norm_stats=norm_stats)
    expected = set(state.named_params())
    if set(opt.m) != expected or set(opt.v) != expected:
        raise CheckpointError(f"{path}: optimizer moments do not match parameters")
    return state
