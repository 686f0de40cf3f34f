"""Samples, availability masks, attribute templating and dataset files."""
from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np


class SchemaError(ValueError):
    pass


class DatasetParseError(ValueError):
    pass


@dataclass(frozen=True)
class AvailabilityMask:
    flags: tuple[bool, ...]

    def __post_init__(self):
        object.__setattr__(self, "flags", tuple(bool(f) for f in self.flags))
        if not any(self.flags):
            raise ValueError("an availability mask needs at least one available modality")

    @property
    def M(self) -> int:
        return len(self.flags)

    @property
    def available(self) -> list[int]:
        return [j for j, f in enumerate(self.flags) if f]

    @property
    def missing(self) -> list[int]:
        return [j for j, f in enumerate(self.flags) if not f]

    def pattern(self) -> str:
        """Digit notation used in result tables: "02" = modalities 0 and 2 available."""
        return "".join(str(j) for j in self.available)

    @classmethod
    def full(cls, M: int) -> "AvailabilityMask":
        return cls((True,) * M)

    @classmethod
    def from_pattern(cls, pattern: str, M: int) -> "AvailabilityMask":
        if not pattern or not pattern.isdigit():
            raise ValueError(f"bad availability pattern {pattern!r}")
        idx = [int(c) for c in pattern]
        if len(set(idx)) != len(idx) or max(idx) >= M:
            raise ValueError(f"pattern {pattern!r} is invalid for {M} modalities")
        return cls(tuple(j in idx for j in range(M)))


def sample_dropout_mask(M: int, rng: np.random.Generator) -> AvailabilityMask:
    """Uniform draw over the 2^M - 1 nonempty modality subsets."""
    code = int(rng.integers(1, 2**M))
    return AvailabilityMask(tuple(bool(code >> j & 1) for j in range(M)))


def enumerate_patterns(M: int) -> list[AvailabilityMask]:
    """All nonempty masks, ordered by subset size then lexicographically (0,1,2,01,02,12,012)."""
    out = []
    for size in range(1, M + 1):
        for combo in itertools.combinations(range(M), size):
            out.append(AvailabilityMask(tuple(j in combo for j in range(M))))
    return out


@dataclass
class RawSample:
    image_features: list[np.ndarray]
    attributes: list[tuple[str, str]]
    label: int
    id: str

    def __eq__(self, other):
        if not isinstance(other, RawSample):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and [tuple(a) for a in self.attributes] == [tuple(a) for a in other.attributes]
            and len(self.image_features) == len(other.image_features)
            and all(np.array_equal(a, b) for a, b in zip(self.image_features, other.image_features))
        )

    @property
    def M(self) -> int:
        return len(self.image_features) + 1


@dataclass
class SampleBatch:
    samples: list[RawSample]
    masks: list[AvailabilityMask]

    def __post_init__(self):
        if not self.samples:
            raise ValueError("empty batch")
        if len(self.masks) != len(self.samples):
            raise ValueError("one mask per sample is required")


@dataclass
class TemplateSchema:
    entries: list[tuple[str, str]]

    def __post_init__(self):
        self.entries = [(str(n), str(t)) for n, t in self.entries]
        names = [n for n, _ in self.entries]
        if len(set(names)) != len(names):
            raise SchemaError("duplicate attribute in schema")
        for name, tmpl in self.entries:
            if tmpl.count("{}") != 2:
                raise SchemaError(f"template for {name!r} must have two {{}} slots")

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def template(self, name: str) -> str:
        for n, t in self.entries:
            if n == name:
                return t
        raise SchemaError(f"no template for attribute {name!r}")


# Attribute templates from the clinical image-tabular setting.
CLINICAL_TEMPLATES = TemplateSchema(
    [
        ("management", "The {} for the patient is {}"),
        ("sex", "The {} of patient is {}"),
        ("age", "The {} of patient is {}"),
        ("tumor area", "The {} in the brain is {}."),
        ("edema area", "The {} in the brain is {}."),
        ("tumor location", "The {} in the brain is {}."),
        ("lesion location", "The {} is {}"),
        ("lesion elevation", "The {} is {}"),
        ("level of diagnostic difficulty", "The {} is {}"),
        ("value of apparent diffusion coefficient", "The {} is {}"),
    ]
)


def render_attributes(attributes: Sequence[tuple[str, str]], schema: TemplateSchema) -> str:
    """Fill each attribute's template and join them in schema order with ". "."""
    values = {}
    for name, value in attributes:
        if name not in schema.names:
            raise SchemaError(f"attribute {name!r} has no template")
        values[name] = value
    parts = [tmpl.format(name, values[name]) for name, tmpl in schema.entries if name in values]
    return ". ".join(parts)


# Synthetic attribute vocabulary: each attribute is a quantized projection of the latent.
SYNTHETIC_ATTRIBUTES: dict[str, list[str]] = {
    "sex": ["female", "male"],
    "age": ["30", "40", "50", "60", "70"],
    "elevation": ["flat", "palpable", "nodular", "raised"],
    "location": ["head", "trunk", "arm", "leg", "back"],
    "management": ["observation", "excision", "biopsy"],
}
SYNTHETIC_TEMPLATE = "The {} is {}"


def synthetic_schema(n_attributes: int) -> TemplateSchema:
    """Single-word attribute names with the short template: four text tokens per attribute."""
    names = list(SYNTHETIC_ATTRIBUTES)[:n_attributes]
    return TemplateSchema([(n, SYNTHETIC_TEMPLATE) for n in names])


@dataclass
class SyntheticSpec:
    M: int = 3
    C: int = 3
    S: tuple[int, ...] = (8, 8, 12)
    latent_dim: int = 32
    noise_std: float = 2.0
    n_samples: int = 2500
    seed: int = 0
    feature_dim: int = 512
    class_sep: float = 1.0
    n_attributes: int = 3

    def validate(self) -> None:
        if self.M < 2 or self.C < 2:
            raise ValueError("need M >= 2 and C >= 2")
        if len(self.S) != self.M:
            raise ValueError(f"S has {len(self.S)} entries, expected M={self.M}")
        if self.n_samples < 0:
            raise ValueError("n_samples must be nonnegative")
        if 0 < self.n_samples < self.C:
            raise ValueError("n_samples must be 0 or at least C")
        if not 1 <= self.n_attributes <= len(SYNTHETIC_ATTRIBUTES):
            raise ValueError(f"n_attributes must be in 1..{len(SYNTHETIC_ATTRIBUTES)}")
        if self.noise_std < 0 or self.class_sep <= 0:
            raise ValueError("noise_std must be >= 0 and class_sep > 0")


@dataclass
class SyntheticWorld:
    """The fixed random structure behind a synthetic dataset."""

    class_means: np.ndarray  # (C, latent_dim)
    image_maps: list[np.ndarray]  # (feature_dim, latent_dim) per image modality
    attribute_map: np.ndarray  # (n_attributes, latent_dim)
    attribute_scale: np.ndarray  # (n_attributes,)
    schema: TemplateSchema


def _build_world(spec: SyntheticSpec, rng: np.random.Generator) -> SyntheticWorld:
    k = spec.latent_dim
    means = rng.normal(0.0, spec.class_sep, size=(spec.C, k))
    maps = [rng.normal(0.0, 1.0 / np.sqrt(k), size=(spec.feature_dim, k)) for _ in range(spec.M - 1)]
    attr_map = rng.normal(0.0, 1.0 / np.sqrt(k), size=(spec.n_attributes, k))
    # Spread of the class-mean projections sets the bin width of each attribute.
    scale = (means @ attr_map.T).std(axis=0) + 1e-12
    return SyntheticWorld(means, maps, attr_map, scale, synthetic_schema(spec.n_attributes))


def _quantize(value: float, scale: float, levels: int) -> int:
    edges = np.linspace(-1.2, 1.2, levels - 1) * scale
    return int(np.searchsorted(edges, value))


def generate_synthetic(spec: SyntheticSpec) -> list[RawSample]:
    """Class-conditioned latent factor data; every modality is a noisy view of the latent.

    z ~ N(mu_y, noise_std^2 I); image payloads are W_m z + noise_std * eta_m; each
    tabular attribute is a quantized projection a_t . z + noise_std * eta_t.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    world = _build_world(spec, rng)
    labels = np.arange(spec.n_samples) % spec.C
    rng.shuffle(labels)
    samples = []
    for i, y in enumerate(labels):
        z = world.class_means[y] + spec.noise_std * rng.standard_normal(spec.latent_dim)
        feats = [
            W @ z + spec.noise_std * rng.standard_normal(spec.feature_dim) for W in world.image_maps
        ]
        t = world.attribute_map @ z + spec.noise_std * rng.standard_normal(spec.n_attributes)
        attrs = []
        for a, name in enumerate(world.schema.names):
            vocab = SYNTHETIC_ATTRIBUTES[name]
            attrs.append((name, vocab[_quantize(t[a], world.attribute_scale[a], len(vocab))]))
        samples.append(RawSample(feats, attrs, int(y), f"s{i:06d}"))
    return samples


def synthetic_world(spec: SyntheticSpec) -> SyntheticWorld:
    return _build_world(spec, np.random.default_rng(spec.seed))


@dataclass
class DatasetManifest:
    M: int
    C: int
    vector_lengths: list[int]
    schema: TemplateSchema
    n_samples: int = 0
    extra: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "M": self.M,
            "C": self.C,
            "vector_lengths": list(self.vector_lengths),
            "schema": [list(e) for e in self.schema.entries],
            "n_samples": self.n_samples,
            **({"extra": self.extra} if self.extra else {}),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "DatasetManifest":
        try:
            return cls(
                M=int(obj["M"]),
                C=int(obj["C"]),
                vector_lengths=[int(v) for v in obj["vector_lengths"]],
                schema=TemplateSchema([tuple(e) for e in obj["schema"]]),
                n_samples=int(obj.get("n_samples", 0)),
                extra=dict(obj.get("extra", {})),
            )
        except (KeyError, TypeError) as exc:
            raise SchemaError(f"malformed manifest: {exc}") from exc

    def fingerprint_fields(self) -> dict:
        return {
            "M": self.M,
            "C": self.C,
            "vector_lengths": list(self.vector_lengths),
            "schema": [list(e) for e in self.schema.entries],
        }


def manifest_path(path: str | Path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".manifest.json")


def save_dataset(
    samples: Sequence[RawSample],
    path: str | Path,
    schema: TemplateSchema,
    C: int,
    M: Optional[int] = None,
    vector_lengths: Optional[list[int]] = None,
) -> DatasetManifest:
    """Write one JSON record per line plus a ``<path>.manifest.json`` sidecar."""
    path = Path(path)
    if samples:
        M = samples[0].M
        vector_lengths = [len(v) for v in samples[0].image_features]
    if M is None or vector_lengths is None:
        raise ValueError("M and vector_lengths are required for an empty dataset")
    with path.open("w") as fh:
        for s in samples:
            rec = {"id": s.id, "label": int(s.label)}
            for m, v in enumerate(s.image_features):
                rec[f"modality_{m}"] = [float(x) for x in v]
            rec["attributes"] = [[n, v] for n, v in s.attributes]
            fh.write(json.dumps(rec) + "\n")
    manifest = DatasetManifest(M, C, list(vector_lengths), schema, len(samples))
    manifest_path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n")
    return manifest


def load_manifest(path: str | Path) -> Optional[DatasetManifest]:
    mp = manifest_path(path)
    if not mp.exists():
        return None
    return DatasetManifest.from_json(json.loads(mp.read_text()))


def _parse_record(line: str, lineno: int, n_images: Optional[int]) -> RawSample:
    try:
        rec = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetParseError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(rec, dict):
        raise DatasetParseError(f"line {lineno}: record is not an object")
    rid = rec.get("id")
    for key in ("id", "label", "attributes"):
        if key not in rec:
            raise DatasetParseError(f"line {lineno} (record {rid!r}): missing field {key!r}")
    present = sorted(
        int(k.split("_", 1)[1]) for k in rec if k.startswith("modality_") and k[9:].isdigit()
    )
    expected = n_images if n_images is not None else len(present)
    for m in range(expected):
        if m not in present:
            raise DatasetParseError(
                f"line {lineno} (record {rid!r}): missing modality vector 'modality_{m}'"
            )
    if len(present) != expected:
        raise SchemaError(
            f"line {lineno} (record {rid!r}): {len(present) + 1} modalities, expected {expected + 1}"
        )
    try:
        feats = [np.asarray(rec[f"modality_{m}"], dtype=np.float64) for m in range(expected)]
        attrs = [(str(n), str(v)) for n, v in rec["attributes"]]
        label = int(rec["label"])
    except (TypeError, ValueError) as exc:
        raise DatasetParseError(f"line {lineno} (record {rid!r}): {exc}") from exc
    if any(f.ndim != 1 for f in feats):
        raise DatasetParseError(f"line {lineno} (record {rid!r}): modality vectors must be flat")
    return RawSample(feats, attrs, label, str(rid))


def load_dataset(path: str | Path) -> list[RawSample]:
    """Read a line-delimited dataset; the manifest, when present, fixes M and vector lengths."""
    path = Path(path)
    manifest = load_manifest(path)
    n_images = manifest.M - 1 if manifest else None
    samples: list[RawSample] = []
    with path.open() as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            s = _parse_record(line, lineno, n_images)
            if n_images is None:
                n_images = len(s.image_features)
            if manifest is not None:
                lens = [len(v) for v in s.image_features]
                if lens != manifest.vector_lengths:
                    raise SchemaError(
                        f"line {lineno} (record {s.id!r}): vector lengths {lens} "
                        f"differ from manifest {manifest.vector_lengths}"
                    )
                for name, _ in s.attributes:
                    if name not in manifest.schema.names:
                        raise SchemaError(f"line {lineno} (record {s.id!r}): unknown attribute {name!r}")
            samples.append(s)
    return samples


def split(samples: Sequence[RawSample], n_train: int) -> tuple[list[RawSample], list[RawSample]]:
    return list(samples[:n_train]), list(samples[n_train:])


def iter_batches(n: int, batch_size: int, order: Optional[Iterable[int]] = None):
    idx = list(range(n)) if order is None else list(order)
    for start in range(0, len(idx), batch_size):
        yield idx[start : start + batch_size]
