"""Dataset plumbing: synthetic paired embeddings, missing-pattern simulation,
per-dimension normalization, and the FEMB container format.

A sample is a pair of modality features (image, text) with a class label and
an availability flag. Missing modalities are stored as ``None``, never as
zero vectors. Features are float32 (the interchange precision); training
code promotes to float64 internally.

FEMB byte layout (little-endian throughout), documented in docs/formats.md:
    magic b"FEMB" | u16 version | u16 n_modalities | u32 d_feature x n_mod
    then one section per modality (image first, then text):
        u32 n_vectors | u64 payload_len | u32 crc32(payload) | payload f32
Sidecar manifest ``<stem>.jsonl``: one JSON line per sample with keys
id, label, availability, restored.
"""

from __future__ import annotations

import json
import struct
import warnings
import zlib
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

COMPLETE = "complete"
IMAGE_ONLY = "image_only"
TEXT_ONLY = "text_only"
AVAILABILITIES = (COMPLETE, IMAGE_ONLY, TEXT_ONLY)

MODALITIES = ("image", "text")

MISSING_IMAGE = "missing_image"
MISSING_TEXT = "missing_text"
MISSING_BOTH = "missing_both"
MISSING_MODES = (MISSING_IMAGE, MISSING_TEXT, MISSING_BOTH)

FEMB_MAGIC = b"FEMB"
FEMB_VERSION = 1

STD_FLOOR = 1e-6


class ContainerError(RuntimeError):
    """Raised when an FEMB file or its manifest cannot be parsed."""


@dataclass
class SamplePair:
    id: str
    label: int
    image_feat: np.ndarray | None = None
    text_feat: np.ndarray | None = None
    availability: str = COMPLETE
    restored: dict = field(default_factory=lambda: {"image": False, "text": False})

    def validate(self) -> None:
        if self.availability not in AVAILABILITIES:
            raise ValueError(f"unknown availability {self.availability!r}")
        has_img, has_txt = self.image_feat is not None, self.text_feat is not None
        expected = {COMPLETE: (True, True), IMAGE_ONLY: (True, False), TEXT_ONLY: (False, True)}
        if (has_img, has_txt) != expected[self.availability]:
            raise ValueError(
                f"sample {self.id}: availability {self.availability} inconsistent with "
                f"features present (image={has_img}, text={has_txt})")

    def feat(self, modality: str) -> np.ndarray | None:
        return self.image_feat if modality == "image" else self.text_feat


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray


@dataclass
class CouplingSpec:
    """Fixed cross-modal map from text features to image features."""

    rotation: bool = True
    offset_scale: float = 1.0
    nonlinearity: str = "tanh"  # "tanh" | "none"
    nonlin_strength: float = 0.5
    noise_std: float = 0.05

    @staticmethod
    def identity() -> "CouplingSpec":
        return CouplingSpec(rotation=False, offset_scale=0.0, nonlinearity="none",
                            nonlin_strength=0.0, noise_std=0.0)


@dataclass
class SyntheticSpec:
    n_clusters: int
    d_feature: int
    n_samples: int
    seed: int = 0
    cluster_sep: float = 2.0
    within_std: float = 0.5
    coupling: CouplingSpec = field(default_factory=CouplingSpec)
    train_fraction: float = 0.8


def generate_synthetic(spec: SyntheticSpec):
    """Paired-manifold dataset: (train split, test split, ground-truth features by id).

    Text features come from a Gaussian mixture; image features are a fixed
    seeded map of the text features (orthogonal rotation, per-cluster offset,
    smooth elementwise nonlinearity) plus isotropic noise. The label is the
    mixture component. The split is a deterministic seeded 80/20.
    """
    if spec.n_clusters < 2:
        raise ValueError("need at least 2 clusters")
    if spec.n_samples < 2 or spec.d_feature < 1:
        raise ValueError("degenerate synthetic spec")
    if spec.coupling.nonlinearity not in ("tanh", "none"):
        raise ValueError(f"unknown nonlinearity {spec.coupling.nonlinearity!r}")

    rng = np.random.default_rng(spec.seed)
    k, d, n = spec.n_clusters, spec.d_feature, spec.n_samples
    means = rng.standard_normal((k, d)) * spec.cluster_sep
    labels = rng.integers(0, k, size=n)
    text = means[labels] + rng.standard_normal((n, d)) * spec.within_std

    if spec.coupling.rotation:
        q, r = np.linalg.qr(rng.standard_normal((d, d)))
        rot = q * np.sign(np.diag(r))
    else:
        rot = np.eye(d)
    offsets = rng.standard_normal((k, d)) * spec.coupling.offset_scale
    v = text @ rot.T + offsets[labels]
    image = v + spec.coupling.nonlin_strength * np.tanh(v) if spec.coupling.nonlinearity == "tanh" else v
    image = image + rng.standard_normal((n, d)) * spec.coupling.noise_std

    image = image.astype(np.float32)
    text = text.astype(np.float32)
    samples = [
        SamplePair(id=f"s{i:06d}", label=int(labels[i]), image_feat=image[i], text_feat=text[i])
        for i in range(n)
    ]
    order = rng.permutation(n)
    n_train = int(np.floor(n * spec.train_fraction))
    train = [samples[i] for i in order[:n_train]]
    test = [samples[i] for i in order[n_train:]]
    truth = {s.id: {"image": s.image_feat.copy(), "text": s.text_feat.copy()} for s in samples}
    return train, test, truth


def apply_missing_pattern(samples, eta_percent: float, mode: str, seed: int):
    """Return a copy of the dataset with availability flags set by a seeded draw.

    Counts follow the floor rule exactly: missing_image/missing_text turn
    floor(eta% * N) samples into single-modality ones; missing_both turns
    floor(eta/2% * N) into image-only plus the same count into text-only.
    """
    if not (0.0 <= eta_percent <= 100.0):
        raise ValueError(f"eta must be in [0, 100], got {eta_percent}")
    if mode not in MISSING_MODES:
        raise ValueError(f"unknown missing mode {mode!r}")
    for s in samples:
        if s.availability != COMPLETE:
            raise ValueError(f"sample {s.id} is not complete; pattern applies to complete datasets")

    n = len(samples)
    perm = np.random.default_rng(seed).permutation(n)
    to_image_only: set = set()
    to_text_only: set = set()
    if mode == MISSING_IMAGE:
        k = int(np.floor(eta_percent * n / 100.0))
        to_text_only = set(perm[:k])
    elif mode == MISSING_TEXT:
        k = int(np.floor(eta_percent * n / 100.0))
        to_image_only = set(perm[:k])
    else:
        k = int(np.floor(eta_percent * n / 200.0))
        to_image_only = set(perm[:k])
        to_text_only = set(perm[k:2 * k])

    out = []
    for i, s in enumerate(samples):
        if i in to_image_only:
            out.append(replace(s, text_feat=None, availability=IMAGE_ONLY,
                               restored=dict(s.restored)))
        elif i in to_text_only:
            out.append(replace(s, image_feat=None, availability=TEXT_ONLY,
                               restored=dict(s.restored)))
        else:
            out.append(replace(s, restored=dict(s.restored)))
    return out


def fit_norm_stats(samples, modality: str) -> NormStats:
    """Per-dimension mean/std (population) over samples carrying the modality."""
    feats = [s.feat(modality) for s in samples if s.feat(modality) is not None]
    if len(feats) < 2:
        raise ValueError(f"need at least 2 samples with {modality} features")
    x = np.asarray(feats, dtype=np.float64)
    mean = x.mean(axis=0)
    std = x.std(axis=0)
    if np.any(std < STD_FLOOR):
        warnings.warn(f"{int((std < STD_FLOOR).sum())} {modality} dimensions have near-zero "
                      f"variance; flooring std at {STD_FLOOR}")
        std = np.maximum(std, STD_FLOOR)
    return NormStats(mean=mean, std=std)


def normalize(feat, stats: NormStats) -> np.ndarray:
    return (np.asarray(feat, dtype=np.float64) - stats.mean) / stats.std


def denormalize(feat, stats: NormStats) -> np.ndarray:
    return np.asarray(feat, dtype=np.float64) * stats.std + stats.mean


# -- FEMB container -------------------------------------------------------

def _has_modality(sample: SamplePair, modality: str) -> bool:
    return sample.feat(modality) is not None


def _manifest_path(path: Path) -> Path:
    return path.with_suffix(".jsonl")


def write_embeddings(samples, path) -> None:
    """Write features to ``path`` (.femb) and the manifest to ``<stem>.jsonl``."""
    path = Path(path)
    dims = []
    for modality in MODALITIES:
        d = {s.feat(modality).shape[0] for s in samples if _has_modality(s, modality)}
        if len(d) > 1:
            raise ValueError(f"inconsistent {modality} dimensions: {sorted(d)}")
        dims.append(d.pop() if d else 0)

    blob = bytearray()
    blob += FEMB_MAGIC
    blob += struct.pack("<HH", FEMB_VERSION, len(MODALITIES))
    blob += struct.pack(f"<{len(MODALITIES)}I", *dims)
    for modality in MODALITIES:
        feats = [np.asarray(s.feat(modality), dtype="<f4") for s in samples
                 if _has_modality(s, modality)]
        payload = np.concatenate(feats).tobytes() if feats else b""
        blob += struct.pack("<IQI", len(feats), len(payload), zlib.crc32(payload))
        blob += payload
    path.write_bytes(bytes(blob))

    with open(_manifest_path(path), "w") as fh:
        for s in samples:
            s.validate()
            line = {"id": s.id, "label": s.label, "availability": s.availability,
                    "restored": {"image": bool(s.restored.get("image", False)),
                                 "text": bool(s.restored.get("text", False))}}
            fh.write(json.dumps(line, separators=(",", ":")) + "\n")


def read_embeddings(path, expected_dims: dict | None = None):
    """Parse an FEMB file plus manifest back into samples.

    ``expected_dims`` optionally maps modality name to the dimension the
    caller requires; a mismatch is a ContainerError.
    """
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8 or raw[:4] != FEMB_MAGIC:
        raise ContainerError(f"{path}: bad magic, not an FEMB container")
    version, n_mod = struct.unpack_from("<HH", raw, 4)
    if version != FEMB_VERSION:
        raise ContainerError(f"{path}: unsupported FEMB version {version}")
    if n_mod != len(MODALITIES):
        raise ContainerError(f"{path}: expected {len(MODALITIES)} modalities, found {n_mod}")
    off = 8
    dims = struct.unpack_from(f"<{n_mod}I", raw, off)
    off += 4 * n_mod
    if expected_dims:
        for i, modality in enumerate(MODALITIES):
            want = expected_dims.get(modality)
            if want is not None and dims[i] != want:
                raise ContainerError(
                    f"{path}: {modality} dimension {dims[i]} != expected {want}")

    features = {}
    for i, modality in enumerate(MODALITIES):
        if off + 16 > len(raw):
            raise ContainerError(f"{path}: truncated before {modality} section header")
        n_vec, payload_len, crc = struct.unpack_from("<IQI", raw, off)
        off += 16
        if payload_len != n_vec * dims[i] * 4:
            raise ContainerError(
                f"{path}: {modality} section length {payload_len} inconsistent with "
                f"{n_vec} vectors of dimension {dims[i]}")
        payload = raw[off:off + payload_len]
        if len(payload) != payload_len:
            raise ContainerError(f"{path}: truncated {modality} payload")
        if zlib.crc32(payload) != crc:
            raise ContainerError(f"{path}: CRC mismatch in {modality} section")
        arr = np.frombuffer(payload, dtype="<f4")
        features[modality] = arr.reshape(n_vec, dims[i]) if n_vec else arr.reshape(0, max(dims[i], 1))
        off += payload_len
    if off != len(raw):
        raise ContainerError(f"{path}: {len(raw) - off} trailing bytes after last section")

    manifest = _manifest_path(path)
    if not manifest.exists():
        raise ContainerError(f"{manifest}: manifest not found")
    samples = []
    cursors = {m: 0 for m in MODALITIES}
    with open(manifest) as fh:
        for lineno, line in enumerate(fh, 1):
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as e:
                raise ContainerError(f"{manifest}:{lineno}: bad manifest line ({e})") from e
            if rec.get("availability") not in AVAILABILITIES:
                raise ContainerError(f"{manifest}:{lineno}: bad availability")
            feats = {}
            for modality in MODALITIES:
                present = (rec["availability"] == COMPLETE
                           or rec["availability"] == f"{modality}_only")
                if present:
                    if cursors[modality] >= len(features[modality]):
                        raise ContainerError(
                            f"{path}: {modality} section has fewer vectors than the manifest requires")
                    feats[modality] = features[modality][cursors[modality]].copy()
                    cursors[modality] += 1
                else:
                    feats[modality] = None
            restored = rec.get("restored", {})
            samples.append(SamplePair(
                id=str(rec["id"]), label=int(rec["label"]),
                image_feat=feats["image"], text_feat=feats["text"],
                availability=rec["availability"],
                restored={"image": bool(restored.get("image", False)),
                          "text": bool(restored.get("text", False))}))
    for modality in MODALITIES:
        if cursors[modality] != len(features[modality]):
            raise ContainerError(
                f"{path}: {modality} section has {len(features[modality])} vectors but the "
                f"manifest accounts for {cursors[modality]}")
    return samples


def count_availability(samples) -> dict:
    counts = {a: 0 for a in AVAILABILITIES}
    for s in samples:
        counts[s.availability] += 1
    return counts
