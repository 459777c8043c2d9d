"""Procedural 16x16 synthetic faces with exact ground truth.

Every image is rendered from a :class:`SyntheticFaceSpec` by closed-form laws,
which makes it possible to invert them (:func:`oracle_age`), to produce
annotations with a known amount of identity leakage
(:func:`extract_age_embedding`), and to measure what averaging buys
(:func:`build_codebook`, :func:`codebook_purity`).

Layout of a render (rows, cols):

* hair band, rows 0-3, all columns -- brightness linear in age
* forehead band, rows 4-7, cols 4-11 -- flat skin tone plus a row-alternating
  wrinkle texture whose amplitude is ``age / 85 * WRINKLE_MAX``
* face oval elsewhere -- geometry, tone, shading and eye depth set by identity
* background outside the oval -- nuisance level plus small pixel noise
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .vocab import tokenize_caption

IMAGE_SIZE = 16
ID_DIM = 8
D_ID = 16
D_AGE = 16
AGE_MIN, AGE_MAX = 1, 85

HAIR_ROWS = slice(0, 4)
FOREHEAD_ROWS = slice(4, 8)
FOREHEAD_COLS = slice(4, 12)

HAIR_DARK = -0.9
HAIR_SPAN = 1.7
WRINKLE_MAX = 0.5
BG_NOISE = 0.03
LEAKAGE_NORM = 0.2
AGE_EMB_NOISE = 0.05
AGE_BUMP_WIDTH = (AGE_MAX - AGE_MIN) / (D_AGE - 1)

# seed for the fixed matrices of the annotation extractors
_CONSTANTS_SEED = 20240917


def render_constants() -> dict:
    return {
        "image_size": IMAGE_SIZE, "hair_dark": HAIR_DARK, "hair_span": HAIR_SPAN,
        "wrinkle_max": WRINKLE_MAX, "bg_noise": BG_NOISE, "leakage_norm": LEAKAGE_NORM,
        "age_emb_noise": AGE_EMB_NOISE, "age_bump_width": AGE_BUMP_WIDTH,
        "constants_seed": _CONSTANTS_SEED,
    }


@dataclass(frozen=True, eq=False)
class SyntheticFaceSpec:
    identity: np.ndarray
    age: int
    nuisance_seed: int = 0

    def __post_init__(self):
        u = np.asarray(self.identity, dtype=np.float64)
        if u.shape != (ID_DIM,):
            raise ValueError(f"identity must have {ID_DIM} entries")
        if np.abs(u).max() > 1.0:
            raise ValueError("identity entries must lie in [-1, 1]")
        if not AGE_MIN <= int(self.age) <= AGE_MAX:
            raise ValueError(f"age {self.age} outside [{AGE_MIN}, {AGE_MAX}]")
        object.__setattr__(self, "identity", u)
        object.__setattr__(self, "age", int(self.age))
        object.__setattr__(self, "nuisance_seed", int(self.nuisance_seed))

    def __eq__(self, other) -> bool:
        if not isinstance(other, SyntheticFaceSpec):
            return NotImplemented
        return (self.age == other.age and self.nuisance_seed == other.nuisance_seed
                and np.array_equal(self.identity, other.identity))

    def __hash__(self) -> int:
        return hash((self.identity.tobytes(), self.age, self.nuisance_seed))

    def with_age(self, age: int) -> "SyntheticFaceSpec":
        return SyntheticFaceSpec(self.identity, age, self.nuisance_seed)

    def to_json(self) -> dict:
        return {"identity": self.identity.tolist(), "age": self.age, "nuisance_seed": self.nuisance_seed}

    @classmethod
    def from_json(cls, obj: dict) -> "SyntheticFaceSpec":
        return cls(np.asarray(obj["identity"]), obj["age"], obj.get("nuisance_seed", 0))


def _as_batch(identity, ages, seeds):
    u = np.atleast_2d(np.asarray(identity, dtype=np.float64))
    a = np.atleast_1d(np.asarray(ages, dtype=np.float64))
    s = np.atleast_1d(np.asarray(seeds, dtype=np.int64))
    return u, a, s


def _background_level(seeds: np.ndarray) -> np.ndarray:
    return np.array([-0.7 + 0.3 * np.random.default_rng([int(s), 1]).random() for s in seeds])


def _background_noise(seeds: np.ndarray) -> np.ndarray:
    return np.stack([np.random.default_rng([int(s), 2]).normal(0.0, BG_NOISE, (IMAGE_SIZE, IMAGE_SIZE))
                     for s in seeds])


def hair_level(age) -> np.ndarray:
    return HAIR_DARK + HAIR_SPAN * (np.asarray(age, dtype=np.float64) - AGE_MIN) / (AGE_MAX - AGE_MIN)


def wrinkle_amplitude(age) -> np.ndarray:
    return np.asarray(age, dtype=np.float64) / AGE_MAX * WRINKLE_MAX


def _wrinkle_pattern() -> np.ndarray:
    return np.array([1.0, -1.0, 1.0, -1.0])


def _oval_geometry(u: np.ndarray):
    cx = 7.5 + 0.8 * u[:, 0]
    cy = 10.0 + 0.5 * u[:, 1]
    rx = 4.6 + 1.0 * u[:, 2]
    ry = 4.8 + 0.6 * u[:, 3]
    return cx, cy, rx, ry


def _oval_mask(u: np.ndarray) -> np.ndarray:
    cx, cy, rx, ry = _oval_geometry(u)
    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    r2 = ((xs - cx[:, None, None]) / rx[:, None, None]) ** 2 + ((ys - cy[:, None, None]) / ry[:, None, None]) ** 2
    d = np.clip((1.0 - r2) / 0.25, 0.0, 1.0)
    return d * d * (3.0 - 2.0 * d)


def skin_tone(u: np.ndarray) -> np.ndarray:
    return 0.2 + 0.3 * np.atleast_2d(u)[:, 4]


def render_faces(identity, ages, nuisance_seeds) -> np.ndarray:
    """Vectorised renderer; returns ``(N, 1, 16, 16)`` float32 images in [-1, 1]."""
    u, a, s = _as_batch(identity, ages, nuisance_seeds)
    n = u.shape[0]
    ys, xs = np.mgrid[0:IMAGE_SIZE, 0:IMAGE_SIZE].astype(np.float64)
    cx, cy, rx, ry = (g[:, None, None] for g in _oval_geometry(u))
    mask = _oval_mask(u)
    tone = skin_tone(u)[:, None, None]
    face = tone + 0.12 * u[:, 5, None, None] * (xs - cx) / rx + 0.12 * u[:, 6, None, None] * (ys - cy) / ry
    eye_depth = (0.35 + 0.25 * u[:, 7])[:, None, None]
    eyes = np.zeros((n, IMAGE_SIZE, IMAGE_SIZE))
    for side in (-1.0, 1.0):
        ex, ey = cx + side * 0.42 * rx, cy - 0.25 * ry
        eyes += np.exp(-((xs - ex) ** 2 + (ys - ey) ** 2) / (2 * 0.7 ** 2))
    bg = _background_level(s)[:, None, None] + _background_noise(s)
    img = mask * (face - eye_depth * eyes) + (1.0 - mask) * bg
    img[:, HAIR_ROWS, :] = hair_level(a)[:, None, None]
    wr = wrinkle_amplitude(a)[:, None, None] * _wrinkle_pattern()[None, :, None]
    img[:, FOREHEAD_ROWS, FOREHEAD_COLS] = tone + wr
    return np.clip(img, -1.0, 1.0).astype(np.float32)[:, None]


def render_face(spec: SyntheticFaceSpec) -> np.ndarray:
    """Render one spec to a ``(1, 16, 16)`` image."""
    if not isinstance(spec, SyntheticFaceSpec):
        raise TypeError("render_face needs a SyntheticFaceSpec")
    return render_faces(spec.identity, spec.age, spec.nuisance_seed)[0]


def region_masks(spec_or_identity) -> dict[str, np.ndarray]:
    """Pixel masks (16x16 floats in [0, 1]) for the hair, forehead and face-oval regions.

    ``face_oval`` excludes the hair and forehead bands so the three regions are
    disjoint; ``age`` is the union of hair and forehead.
    """
    u = spec_or_identity.identity if isinstance(spec_or_identity, SyntheticFaceSpec) else spec_or_identity
    oval = _oval_mask(np.atleast_2d(u))[0]
    hair = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
    hair[HAIR_ROWS, :] = 1.0
    forehead = np.zeros_like(hair)
    forehead[FOREHEAD_ROWS, FOREHEAD_COLS] = 1.0
    oval = oval * (1.0 - hair) * (1.0 - forehead)
    return {"hair": hair, "forehead": forehead, "age": hair + forehead, "face_oval": oval}


def patch_fractions(mask: np.ndarray, patch: int = 4) -> np.ndarray:
    """Fraction of each ``patch x patch`` tile covered by a pixel mask, in token order."""
    h, w = mask.shape
    return mask.reshape(h // patch, patch, w // patch, patch).mean(axis=(1, 3)).reshape(-1)


# age oracle ----------------------------------------------------------------

_FIT_DESIGN = np.stack([np.ones(4), np.arange(4.0) - 1.5, _wrinkle_pattern()], axis=1)
_FIT_PINV = np.linalg.pinv(_FIT_DESIGN)
ORACLE_FALLBACK_AGE = 0.5 * (AGE_MIN + AGE_MAX)
ORACLE_HAIR_WEIGHT = 0.8


def oracle_age(images, return_confidence: bool = False):
    """Invert the render laws to estimate age.

    Hair brightness gives one estimate, the wrinkle amplitude (least-squares
    fit of offset + row trend + alternating pattern per forehead column) gives
    another; they are blended with fixed weights. Confidence decays with their
    disagreement. A flat image carries no information and returns the
    mid-range age with zero confidence.
    """
    x = np.asarray(images, dtype=np.float64)
    single = x.ndim <= 3
    x = x.reshape(-1, IMAGE_SIZE, IMAGE_SIZE)
    age_hair = AGE_MIN + (AGE_MAX - AGE_MIN) * (x[:, HAIR_ROWS, :].mean(axis=(1, 2)) - HAIR_DARK) / HAIR_SPAN
    band = x[:, FOREHEAD_ROWS, FOREHEAD_COLS]
    coef = np.einsum("pr,nrc->npc", _FIT_PINV, band)
    amp = coef[:, 2, :].mean(axis=1)
    age_wrinkle = AGE_MAX * amp / WRINKLE_MAX
    age = ORACLE_HAIR_WEIGHT * age_hair + (1.0 - ORACLE_HAIR_WEIGHT) * age_wrinkle
    conf = np.exp(-np.abs(age_hair - age_wrinkle) / 10.0)
    flat = x.reshape(len(x), -1).std(axis=1) < 1e-9
    age = np.where(flat, ORACLE_FALLBACK_AGE, age)
    conf = np.where(flat, 0.0, conf)
    if single:
        age, conf = float(age[0]), float(conf[0])
    return (age, conf) if return_confidence else age


# annotation extractors -----------------------------------------------------

@lru_cache(maxsize=None)
def _extractor_constants():
    rng = np.random.default_rng(_CONSTANTS_SEED)
    id_matrix = rng.normal(0.0, 1.0 / np.sqrt(ID_DIM), size=(D_ID, ID_DIM))
    id_offset = rng.normal(0.0, 1.0, size=D_ID)
    id_offset *= 1.0 / np.linalg.norm(id_offset)
    g = rng.normal(size=(D_AGE, ID_DIM))
    g *= LEAKAGE_NORM / np.linalg.norm(g, 2)
    centers = np.linspace(AGE_MIN, AGE_MAX, D_AGE)
    return id_matrix, id_offset, g, centers


def leakage_matrix() -> np.ndarray:
    return _extractor_constants()[2].copy()


def age_encoding(age) -> np.ndarray:
    """The identity-free part of the age embedding: Gaussian bumps along the age axis."""
    centers = _extractor_constants()[3]
    a = np.asarray(age, dtype=np.float64)[..., None]
    return np.exp(-0.5 * ((a - centers) / AGE_BUMP_WIDTH) ** 2)


def id_embeddings(identity) -> np.ndarray:
    m, b, _, _ = _extractor_constants()
    v = np.atleast_2d(identity) @ m.T + b
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def extract_id_embedding(spec: SyntheticFaceSpec) -> np.ndarray:
    """Unit-norm 16-d identity embedding; depends on the identity vector only."""
    return id_embeddings(spec.identity)[0]


def age_embeddings(identity, ages, nuisance_seeds, noise: bool = True) -> np.ndarray:
    u, a, s = _as_batch(identity, ages, nuisance_seeds)
    g = _extractor_constants()[2]
    e = age_encoding(a) + u @ g.T
    if noise:
        e = e + np.stack([np.random.default_rng([int(x), 3]).normal(0.0, AGE_EMB_NOISE, D_AGE) for x in s])
    return e


def extract_age_embedding(spec: SyntheticFaceSpec, noise: bool = True) -> np.ndarray:
    """``f(age) + G u + eta``; ``eta`` is drawn from the spec's nuisance seed."""
    return age_embeddings(spec.identity, spec.age, spec.nuisance_seed, noise=noise)[0]


def identity_cluster(identity) -> np.ndarray:
    """Quadrant of the first two identity coordinates (0..3)."""
    u = np.atleast_2d(identity)
    return (2 * (u[:, 0] > 0) + (u[:, 1] > 0)).astype(np.int64)


def caption_words(identity, background_level: float) -> list[str]:
    u = np.asarray(identity)
    words: list[str] = []
    if u[2] - u[3] > 0.5:
        words += ["wide", "face"]
    elif u[3] - u[2] > 0.5:
        words += ["long", "face"]
    else:
        words += ["round" if u[2] + u[3] > 0 else "oval", "face"]
    words += [("light" if u[4] > 0.33 else "dark" if u[4] < -0.33 else "medium"), "skin"]
    if abs(u[5]) > 0.5:
        words += ["right" if u[5] > 0 else "left", "lit"]
    if u[7] > 0.5:
        words += ["deep", "eyes"]
    words += ["bright" if background_level > -0.55 else "dim", "background"]
    return words


def describe(spec: SyntheticFaceSpec) -> list[str]:
    return caption_words(spec.identity, float(_background_level(np.array([spec.nuisance_seed]))[0]))


# dataset -------------------------------------------------------------------

@dataclass(frozen=True)
class DatasetRecord:
    image: np.ndarray
    caption_tokens: np.ndarray
    id_embedding: np.ndarray
    age_embedding: np.ndarray
    age_value: int
    spec: SyntheticFaceSpec

    def __post_init__(self):
        if self.image.shape != (1, IMAGE_SIZE, IMAGE_SIZE):
            raise ValueError("image must be 1x16x16")
        if np.abs(self.image).max() > 1.0:
            raise ValueError("image values must lie in [-1, 1]")
        for name in ("caption_tokens", "id_embedding", "age_embedding"):
            if getattr(self, name) is None or len(getattr(self, name)) == 0:
                raise ValueError(f"missing annotation {name}")
        if not AGE_MIN <= self.age_value <= AGE_MAX:
            raise ValueError("age out of range")


def _checksum(arr: np.ndarray) -> str:
    return hashlib.sha256(np.ascontiguousarray(arr).tobytes()).hexdigest()


@dataclass
class FaceDataset:
    """Column-oriented dataset; indexing and iteration yield :class:`DatasetRecord`."""

    images: np.ndarray
    caption_tokens: np.ndarray
    id_embeddings: np.ndarray
    age_embeddings: np.ndarray
    ages: np.ndarray
    identities: np.ndarray
    nuisance_seeds: np.ndarray
    manifest: dict = field(default_factory=dict)

    FIELDS = ("images", "caption_tokens", "id_embeddings", "age_embeddings", "ages",
              "identities", "nuisance_seeds")

    def __len__(self) -> int:
        return len(self.ages)

    def __getitem__(self, i):
        if isinstance(i, (slice, np.ndarray, list)):
            return self.subset(np.arange(len(self))[i])
        spec = SyntheticFaceSpec(self.identities[i], int(self.ages[i]), int(self.nuisance_seeds[i]))
        return DatasetRecord(self.images[i], self.caption_tokens[i], self.id_embeddings[i],
                             self.age_embeddings[i], int(self.ages[i]), spec)

    def __iter__(self) -> Iterator[DatasetRecord]:
        for i in range(len(self)):
            yield self[i]

    def subset(self, index) -> "FaceDataset":
        index = np.asarray(index)
        return FaceDataset(*(getattr(self, f)[index] for f in self.FIELDS), manifest=dict(self.manifest))

    def specs(self) -> list[SyntheticFaceSpec]:
        return [SyntheticFaceSpec(u, int(a), int(s))
                for u, a, s in zip(self.identities, self.ages, self.nuisance_seeds)]

    def checksums(self) -> dict[str, str]:
        return {f: _checksum(getattr(self, f)) for f in self.FIELDS}


def manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_hash"}
    return hashlib.sha256(json.dumps(body, sort_keys=True).encode()).hexdigest()


def _age_probabilities(age_distribution) -> np.ndarray:
    ages = np.arange(AGE_MIN, AGE_MAX + 1)
    if age_distribution is None or (isinstance(age_distribution, str) and age_distribution == "uniform"):
        return np.full(len(ages), 1.0 / len(ages))
    p = np.asarray(age_distribution, dtype=np.float64)
    if p.shape != ages.shape or (p < 0).any() or p.sum() <= 0:
        raise ValueError("age_distribution must be 'uniform' or 85 non-negative weights")
    return p / p.sum()


def dataset_from_specs(identities, ages, nuisance_seeds, manifest: dict | None = None) -> FaceDataset:
    u, a, s = _as_batch(identities, ages, nuisance_seeds)
    images = render_faces(u, a, s)
    bg = _background_level(s)
    captions = np.stack([tokenize_caption(caption_words(ui, b)) for ui, b in zip(u, bg)])
    return FaceDataset(images, captions, id_embeddings(u).astype(np.float32),
                       age_embeddings(u, a, s).astype(np.float32), a.astype(np.int64), u, s,
                       manifest=manifest or {})


def generate_dataset(n: int, seed: int, age_distribution="uniform") -> FaceDataset:
    """Draw ``n`` fully annotated records; ``(n, seed, age_distribution)`` fix every byte."""
    if n < 1:
        raise ValueError("n must be at least 1")
    p = _age_probabilities(age_distribution)
    rng = np.random.default_rng(seed)
    ages = rng.choice(np.arange(AGE_MIN, AGE_MAX + 1), size=n, p=p)
    identities = rng.uniform(-1.0, 1.0, size=(n, ID_DIM))
    seeds = rng.integers(0, 2**31 - 1, size=n)
    ds = dataset_from_specs(identities, ages, seeds)
    manifest = {
        "format_version": 1,
        "n": int(n),
        "seed": int(seed),
        "age_distribution": "uniform" if isinstance(age_distribution, str) or age_distribution is None
        else [float(x) for x in p],
        "constants": render_constants(),
        "age_counts": {str(int(a)): int(c) for a, c in zip(*np.unique(ages, return_counts=True))},
        "checksums": ds.checksums(),
        "provenance": {"filtering": "none (synthetic)", "cropping": "none (synthetic)",
                       "super_resolution": "none (synthetic)", "captioning": "attribute template"},
    }
    manifest["manifest_hash"] = manifest_hash(manifest)
    ds.manifest = manifest
    return ds


def stratified_specs(n: int, seed: int, ages=None) -> list[SyntheticFaceSpec]:
    """Held-out specs with ages spread evenly over the range (or over ``ages``)."""
    rng = np.random.default_rng(seed)
    pool = np.arange(AGE_MIN, AGE_MAX + 1) if ages is None else np.asarray(ages)
    strata = np.array_split(pool, min(n, len(pool)))
    out = []
    for i in range(n):
        stratum = strata[i % len(strata)]
        out.append(SyntheticFaceSpec(rng.uniform(-1, 1, ID_DIM), int(rng.choice(stratum)),
                                     int(rng.integers(0, 2**31 - 1))))
    return out


# age codebook --------------------------------------------------------------

@dataclass
class AgeCodebook:
    entries: dict[int, np.ndarray]
    counts: dict[int, int]
    key: str = "age"

    def __contains__(self, value) -> bool:
        return int(value) in self.entries

    def __getitem__(self, value) -> np.ndarray:
        try:
            return self.entries[int(value)]
        except KeyError:
            raise KeyError(f"{self.key} {value} not in codebook") from None

    def __len__(self) -> int:
        return len(self.entries)

    def keys(self) -> list[int]:
        return sorted(self.entries)

    def lookup(self, values) -> np.ndarray:
        return np.stack([self[v] for v in np.atleast_1d(values)])

    def to_json(self) -> dict:
        return {"format_version": 1, "key": self.key,
                "entries": {str(k): {"embedding": self.entries[k].tolist(), "count": self.counts[k]}
                            for k in self.keys()}}

    @classmethod
    def from_json(cls, obj: dict) -> "AgeCodebook":
        if obj.get("format_version") != 1:
            raise ValueError("unsupported codebook format version")
        entries = {int(k): np.asarray(v["embedding"], dtype=np.float64) for k, v in obj["entries"].items()}
        counts = {int(k): int(v["count"]) for k, v in obj["entries"].items()}
        return cls(entries, counts, obj.get("key", "age"))


def _keys_and_embeddings(records, key: str):
    if isinstance(records, FaceDataset):
        if key not in ("age", "ages"):
            raise ValueError(f"FaceDataset only carries the 'age' attribute, not {key!r}")
        return records.ages, np.asarray(records.age_embeddings, dtype=np.float64)
    records = list(records)
    attr = "age_value" if key == "age" else key
    return (np.array([getattr(r, attr) for r in records]),
            np.stack([np.asarray(r.age_embedding, dtype=np.float64) for r in records]))


def codebook_from_arrays(keys, embeddings, key: str = "age") -> AgeCodebook:
    keys = np.asarray(keys)
    if len(keys) == 0:
        raise ValueError("cannot build a codebook from no records")
    embeddings = np.asarray(embeddings, dtype=np.float64)
    entries, counts = {}, {}
    for k in np.unique(keys):
        sel = keys == k
        entries[int(k)] = embeddings[sel].mean(axis=0)
        counts[int(k)] = int(sel.sum())
    return AgeCodebook(entries, counts, key)


def build_codebook(records, key: str = "age") -> AgeCodebook:
    """Per-value arithmetic mean of the age embeddings."""
    if len(records) == 0:
        raise ValueError("cannot build a codebook from no records")
    keys, emb = _keys_and_embeddings(records, key)
    return codebook_from_arrays(keys, emb, key)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b)))


def codebook_purity(records, partition_key: str | Callable | None = "identity_cluster") -> dict:
    """Mean cosine similarity between each subset's codebook and the overall one.

    ``partition_key`` is ``"identity_cluster"`` (quadrant of identity
    coordinates 0 and 1), ``None`` (the whole set is one subset), or a callable
    mapping a :class:`DatasetRecord` to a label.
    """
    if isinstance(records, FaceDataset):
        ds = records
    else:
        recs = list(records)
        ds = FaceDataset(np.stack([r.image for r in recs]), np.stack([r.caption_tokens for r in recs]),
                         np.stack([r.id_embedding for r in recs]), np.stack([r.age_embedding for r in recs]),
                         np.array([r.age_value for r in recs]), np.stack([r.spec.identity for r in recs]),
                         np.array([r.spec.nuisance_seed for r in recs]))
    if partition_key is None:
        labels = np.zeros(len(ds), dtype=np.int64)
    elif partition_key == "identity_cluster":
        labels = identity_cluster(ds.identities)
    elif callable(partition_key):
        labels = np.array([partition_key(r) for r in ds])
    else:
        raise ValueError(f"unknown partition key {partition_key!r}")
    overall = codebook_from_arrays(ds.ages, ds.age_embeddings)
    table = {}
    for label in np.unique(labels):
        sel = labels == label
        if not sel.any():
            raise ValueError(f"subset {label} has no records")
        sub = codebook_from_arrays(ds.ages[sel], ds.age_embeddings[sel])
        sims = [_cosine(sub[a], overall[a]) for a in sub.keys()]
        table[label.item() if hasattr(label, "item") else label] = float(np.mean(sims))
    return table


# identity encoder ----------------------------------------------------------

class EncoderMissingError(RuntimeError):
    pass


@dataclass
class IdentityEncoder:
    """Frozen image -> identity embedding map.

    A ridge regressor on pixels (plus random ReLU features) predicts the
    identity vector; a fixed random-Fourier lift turns the prediction into a
    high-dimensional unit vector, so cosine similarity behaves like a Gaussian
    kernel on identity space and unrelated identities land near-orthogonal.
    """

    feature_w: np.ndarray
    feature_b: np.ndarray
    ridge_w: np.ndarray
    lift_w: np.ndarray
    lift_b: np.ndarray
    val_r2: float = float("nan")

    def _features(self, images) -> np.ndarray:
        x = np.asarray(images, dtype=np.float64).reshape(-1, IMAGE_SIZE * IMAGE_SIZE)
        h = np.maximum(x @ self.feature_w + self.feature_b, 0.0)
        return np.concatenate([np.ones((len(x), 1)), x, h], axis=1)

    def predict_identity(self, images) -> np.ndarray:
        return self._features(images) @ self.ridge_w

    def embed(self, images) -> np.ndarray:
        z = np.cos(self.predict_identity(images) @ self.lift_w + self.lift_b)
        return z / np.linalg.norm(z, axis=1, keepdims=True)

    @classmethod
    def fit(cls, n: int = 20000, seed: int = 11, hidden: int = 512, ridge: float = 1.0,
            lift_dim: int = 512, bandwidth: float = 1.0, noise: float = 0.1,
            blur: float = 0.8) -> "IdentityEncoder":
        """Fit on ``n`` random renders.

        Each training render is blurred by a random Gaussian (sigma up to
        ``blur`` pixels) and corrupted with white noise of random level up to
        ``noise`` so the encoder tolerates the small errors generated images
        carry.
        """
        rng = np.random.default_rng(seed)
        u = rng.uniform(-1, 1, size=(n, ID_DIM))
        ages = rng.integers(AGE_MIN, AGE_MAX + 1, size=n)
        seeds = rng.integers(0, 2**31 - 1, size=n)
        x = render_faces(u, ages, seeds)[:, 0].astype(np.float64)
        if blur > 0:
            sig = rng.uniform(0.0, blur, size=n)
            x = np.stack([gaussian_filter(xi, si) for xi, si in zip(x, sig)])
        x = x.reshape(n, -1)
        if noise > 0:
            x = x + rng.normal(0.0, 1.0, x.shape) * rng.uniform(0.0, noise, (n, 1))
        fw = rng.normal(0.0, 1.0 / np.sqrt(x.shape[1]), size=(x.shape[1], hidden)) * 3.0
        fb = rng.normal(0.0, 1.0, size=hidden)
        enc = cls(fw, fb, np.zeros((1 + x.shape[1] + hidden, ID_DIM)),
                  rng.normal(0.0, 1.0 / bandwidth, size=(ID_DIM, lift_dim)),
                  rng.uniform(0, 2 * np.pi, size=lift_dim))
        n_val = n // 10
        phi = enc._features(x[n_val:])
        gram = phi.T @ phi + ridge * np.eye(phi.shape[1])
        enc.ridge_w = np.linalg.solve(gram, phi.T @ u[n_val:])
        pred = enc.predict_identity(x[:n_val])
        resid = ((pred - u[:n_val]) ** 2).sum()
        enc.val_r2 = float(1.0 - resid / ((u[:n_val] - u[:n_val].mean(0)) ** 2).sum())
        return enc

    def state(self) -> dict[str, np.ndarray]:
        return {"feature_w": self.feature_w, "feature_b": self.feature_b, "ridge_w": self.ridge_w,
                "lift_w": self.lift_w, "lift_b": self.lift_b, "val_r2": np.array(self.val_r2)}

    @classmethod
    def from_state(cls, state) -> "IdentityEncoder":
        return cls(*(np.asarray(state[k]) for k in ("feature_w", "feature_b", "ridge_w", "lift_w", "lift_b")),
                   val_r2=float(state["val_r2"]))


@lru_cache(maxsize=1)
def pinned_identity_encoder() -> IdentityEncoder:
    """The encoder every evaluation uses; rebuilt deterministically from fixed seeds."""
    return IdentityEncoder.fit()


def identity_similarity(image_a, image_b, encoder: IdentityEncoder | None = None):
    """Cosine similarity of identity embeddings; batched inputs give one value per pair."""
    if encoder is None:
        encoder = pinned_identity_encoder()
    if not isinstance(encoder, IdentityEncoder):
        raise EncoderMissingError("no identity encoder available")
    a = np.asarray(image_a)
    single = a.ndim <= 3
    ea = encoder.embed(a)
    eb = encoder.embed(image_b)
    sims = np.clip((ea * eb).sum(axis=1), -1.0, 1.0)
    return float(sims[0]) if single else sims


def identity_calibration(n_pairs: int = 1000, seed: int = 5, encoder: IdentityEncoder | None = None) -> dict:
    """Similarity distribution of unrelated identity pairs rendered at random ages."""
    rng = np.random.default_rng(seed)
    ua = rng.uniform(-1, 1, (n_pairs, ID_DIM))
    ub = rng.uniform(-1, 1, (n_pairs, ID_DIM))
    ages = rng.integers(AGE_MIN, AGE_MAX + 1, size=(2, n_pairs))
    seeds = rng.integers(0, 2**31 - 1, size=(2, n_pairs))
    sims = identity_similarity(render_faces(ua, ages[0], seeds[0]), render_faces(ub, ages[1], seeds[1]), encoder)
    return {"mean": float(sims.mean()), "std": float(sims.std(ddof=1)),
            "p95": float(np.percentile(sims, 95)), "n": n_pairs, "sims": sims}
