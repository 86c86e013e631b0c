"""Synthetic paired datasets with controllable many-to-many structure.

Each sample owns a sparse mixture of shared latent concepts. Image, text
and tag views are fixed random linear maps of the sample latent (plus
Gaussian noise); each of the M region-of-interest (ROI) views maps a
single active concept, standing in for detector features that carry
object-level priors. A fraction of samples are "faulty positives": their
text view is generated from an independently drawn latent, but the
ground-truth relevance matrix keeps scoring them by the pre-corruption
latent, so the oracle sees through the noise the model is fed.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
import numpy as np

from . import container
from .errors import FormatError, SpecInvalid

MAGIC = "SALB"

_ARRAY_FIELDS = (
    "image_features", "text_features", "roi_features", "tag_features", "relevance",
)


@dataclass(frozen=True)
class SynthSpec:
    """Generation parameters; defaults define the standard benchmark set."""

    n_samples: int = 2000
    n_concepts: int = 20
    latent_dim: int = 32
    concepts_per_sample: int = 3
    d_image: int = 64
    d_text: int = 48
    d_roi: int = 2052
    d_tag: int = 32
    rois_per_image: int = 10
    noise_sigma_image: float = 0.05
    noise_sigma_text: float = 0.05
    noise_sigma_roi: float = 0.05
    noise_sigma_tag: float = 0.05
    faulty_positive_rate: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise SpecInvalid(f"n_samples must be >= 1, got {self.n_samples}")
        if self.n_concepts < 1:
            raise SpecInvalid(f"n_concepts must be >= 1, got {self.n_concepts}")
        if self.latent_dim < 1:
            raise SpecInvalid(f"latent_dim must be >= 1, got {self.latent_dim}")
        if not 1 <= self.concepts_per_sample <= self.n_concepts:
            raise SpecInvalid(
                f"concepts_per_sample must be in [1, n_concepts={self.n_concepts}], "
                f"got {self.concepts_per_sample}"
            )
        for name in ("d_image", "d_text", "d_roi", "d_tag", "rois_per_image"):
            if getattr(self, name) < 1:
                raise SpecInvalid(f"{name} must be >= 1, got {getattr(self, name)}")
        for name in ("noise_sigma_image", "noise_sigma_text",
                     "noise_sigma_roi", "noise_sigma_tag"):
            if getattr(self, name) < 0:
                raise SpecInvalid(f"{name} must be >= 0, got {getattr(self, name)}")
        if not 0.0 <= self.faulty_positive_rate < 1.0:
            raise SpecInvalid(
                f"faulty_positive_rate must be in [0, 1), got {self.faulty_positive_rate}"
            )
        if self.seed < 0:
            raise SpecInvalid(f"seed must be >= 0, got {self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise SpecInvalid(f"unknown SynthSpec keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class SynthDataset:
    """Generated views plus the ground-truth relevance matrix."""

    image_features: np.ndarray   # (n, d_image)
    text_features: np.ndarray    # (n, d_text)
    roi_features: np.ndarray     # (n, M, d_roi)
    tag_features: np.ndarray     # (n, d_tag)
    relevance: np.ndarray        # (n, n), symmetric, unit diagonal
    spec: SynthSpec

    @property
    def n(self) -> int:
        return self.spec.n_samples


def _unit_rows(m: np.ndarray) -> np.ndarray:
    return m / np.sqrt((m * m).sum(axis=1))[:, None]


def _concept_subsets(rng: np.random.Generator, n: int, k: int, cps: int) -> np.ndarray:
    """Balanced sparse subsets: chunks of repeated seeded permutations.

    Chunking permutations keeps concept usage balanced and guarantees
    distinct concepts per sample whenever n * cps <= k (e.g. one concept
    per sample with k >= n); chunks that straddle a permutation boundary
    and collide are redrawn without replacement.
    """
    need = n * cps
    stream = np.concatenate([
        rng.permutation(k) for _ in range(-(-need // k))
    ])[:need]
    subsets = stream.reshape(n, cps)
    for i in range(n):
        if len(set(subsets[i].tolist())) != cps:
            subsets[i] = rng.choice(k, size=cps, replace=False)
    return subsets


def _mixture_latent(rng: np.random.Generator, concepts: np.ndarray,
                    idx: np.ndarray) -> np.ndarray:
    # positive weights bounded away from zero; redraw on near-cancellation
    for _ in range(16):
        w = rng.random(idx.size) + 0.2
        z = w @ concepts[idx]
        norm = float(np.sqrt((z * z).sum()))
        if norm > 1e-9:
            return z / norm
    raise SpecInvalid("could not draw a non-degenerate concept mixture")


def generate(spec: SynthSpec) -> SynthDataset:
    """Deterministically generate a dataset from its spec.

    Draw order (fixed for reproducibility): concept vectors, the four view
    maps, per-sample concept subsets, per-sample mixture weights and ROI
    concept picks, the faulty-positive mask, replacement latents for
    faulty samples, then per-view Gaussian noise. Relevance uses the
    pre-corruption latents, so raising the faulty rate never changes it.
    """
    rng = np.random.default_rng(spec.seed)
    n, k, latent = spec.n_samples, spec.n_concepts, spec.latent_dim
    cps, m = spec.concepts_per_sample, spec.rois_per_image

    concepts = _unit_rows(rng.standard_normal((k, latent)))
    w_image = rng.standard_normal((latent, spec.d_image))
    w_text = rng.standard_normal((latent, spec.d_text))
    w_roi = rng.standard_normal((latent, spec.d_roi))
    w_tag = rng.standard_normal((latent, spec.d_tag))

    subsets = _concept_subsets(rng, n, k, cps)
    latents = np.empty((n, latent))
    roi_concepts = np.empty((n, m), dtype=np.int64)
    for i in range(n):
        latents[i] = _mixture_latent(rng, concepts, subsets[i])
        roi_concepts[i] = rng.choice(subsets[i], size=m, replace=True)

    faulty = rng.random(n) < spec.faulty_positive_rate
    text_latents = latents.copy()
    for i in np.flatnonzero(faulty):
        fake_idx = rng.choice(k, size=cps, replace=False)
        text_latents[i] = _mixture_latent(rng, concepts, fake_idx)

    image = latents @ w_image
    if spec.noise_sigma_image > 0:
        image = image + spec.noise_sigma_image * rng.standard_normal(image.shape)
    text = text_latents @ w_text
    if spec.noise_sigma_text > 0:
        text = text + spec.noise_sigma_text * rng.standard_normal(text.shape)
    tag_base = concepts[subsets].mean(axis=1)
    tag = tag_base @ w_tag
    if spec.noise_sigma_tag > 0:
        tag = tag + spec.noise_sigma_tag * rng.standard_normal(tag.shape)
    roi = concepts[roi_concepts] @ w_roi
    if spec.noise_sigma_roi > 0:
        roi = roi + spec.noise_sigma_roi * rng.standard_normal(roi.shape)

    relevance = latents @ latents.T
    relevance = 0.5 * (relevance + relevance.T)
    np.clip(relevance, -1.0, 1.0, out=relevance)
    np.fill_diagonal(relevance, 1.0)

    return SynthDataset(
        image_features=image, text_features=text, roi_features=roi,
        tag_features=tag, relevance=relevance, spec=spec,
    )


def to_bytes(dataset: SynthDataset) -> bytes:
    arrays = {name: getattr(dataset, name) for name in _ARRAY_FIELDS}
    return container.pack(MAGIC, {"spec": dataset.spec.to_dict()}, arrays)


def save(dataset: SynthDataset, path) -> None:
    """Write the dataset container; round-trips bitwise."""
    with open(path, "wb") as fh:
        fh.write(to_bytes(dataset))


def from_bytes(blob: bytes) -> SynthDataset:
    meta, arrays = container.unpack(blob, MAGIC)
    if "spec" not in meta:
        raise FormatError("dataset header is missing the generation spec")
    spec = SynthSpec.from_dict(meta["spec"])
    missing = [name for name in _ARRAY_FIELDS if name not in arrays]
    if missing:
        raise FormatError(f"dataset is missing arrays: {missing}")
    expected = {
        "image_features": (spec.n_samples, spec.d_image),
        "text_features": (spec.n_samples, spec.d_text),
        "roi_features": (spec.n_samples, spec.rois_per_image, spec.d_roi),
        "tag_features": (spec.n_samples, spec.d_tag),
        "relevance": (spec.n_samples, spec.n_samples),
    }
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise FormatError(
                f"array {name!r} has shape {arrays[name].shape}, expected {shape}"
            )
    return SynthDataset(spec=spec, **{name: arrays[name] for name in _ARRAY_FIELDS})


def load(path) -> SynthDataset:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def dataset_hash(dataset: SynthDataset) -> str:
    """Short stable content hash used in result metadata."""
    import hashlib

    return hashlib.sha256(to_bytes(dataset)).hexdigest()[:16]
