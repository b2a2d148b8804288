"""Synthetic labeled volumes with templated reports and synonym variants.

A registry defines geometric "organs" (sphere/box/ellipsoid) with separated
intensity bands, synonyms that share no whole word with the canonical name,
and optional merge groups (paired organs a merged prompt unions together).
Generation is deterministic per derived seed, so a corpus is a pure function
of (registry, base seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

from .config import rng_for
from .corpus import ReportRecord

__all__ = [
    "PhantomError",
    "OrganSpec",
    "Registry",
    "PhantomSample",
    "load_registry",
    "generate_phantom",
    "generate_report",
    "merged_ground_truth",
    "build_corpus",
    "to_report_records",
    "lexicon_terms",
    "MIN_ORGAN_VOXELS",
]

MIN_ORGAN_VOXELS = 8
_SHAPES = ("sphere", "box", "ellipsoid")


class PhantomError(ValueError):
    pass


@dataclass
class OrganSpec:
    name: str
    label: int
    synonyms: list
    shape: str
    center: tuple
    center_jitter: int
    size_range: tuple
    intensity_band: tuple
    merge_group: str | None = None


@dataclass
class Registry:
    grid: tuple
    background_intensity: float
    noise_sigma: float
    presence_probability: float
    min_band_separation: float
    templates: list
    organs: list
    merged_prompts: dict
    merge_groups: dict = field(init=False)

    def __post_init__(self):
        self.merge_groups = {}
        for organ in self.organs:
            if organ.merge_group:
                self.merge_groups.setdefault(organ.merge_group, []).append(organ.name)
        self._validate()

    def organ_by_name(self, name: str) -> OrganSpec:
        for organ in self.organs:
            if organ.name == name:
                return organ
        raise PhantomError(f"unknown organ {name!r}")

    def _validate(self):
        if not self.templates:
            raise PhantomError("registry has no caption templates")
        for t in self.templates:
            if "<name>" not in t:
                raise PhantomError(f"template {t!r} lacks the <name> placeholder")
        labels = [o.label for o in self.organs]
        if len(set(labels)) != len(labels) or any(l <= 0 for l in labels):
            raise PhantomError("organ labels must be unique positive integers")
        names = [o.name for o in self.organs]
        if len(set(names)) != len(names):
            raise PhantomError("organ names must be unique")
        for organ in self.organs:
            lo, hi = organ.intensity_band
            if not (0.0 < lo <= hi <= 1.0):
                raise PhantomError(
                    f"organ {organ.name!r} intensity band {organ.intensity_band} "
                    "must satisfy 0 < lo <= hi <= 1")
            if organ.shape not in _SHAPES:
                raise PhantomError(f"organ {organ.name!r} has unknown shape {organ.shape!r}")
            canon_words = set(organ.name.split())
            for syn in organ.synonyms:
                shared = canon_words & set(syn.split())
                if shared:
                    raise PhantomError(
                        f"synonym {syn!r} of {organ.name!r} shares whole words "
                        f"{sorted(shared)} with the canonical name; synonym "
                        "generalization would reduce to lexical overlap")
        # bands of distinct organs must be separated so organs stay learnable
        for i, a in enumerate(self.organs):
            for b in self.organs[i + 1:]:
                gap = max(b.intensity_band[0] - a.intensity_band[1],
                          a.intensity_band[0] - b.intensity_band[1])
                if gap < self.min_band_separation:
                    raise PhantomError(
                        f"intensity bands of {a.name!r} and {b.name!r} are separated "
                        f"by {gap:.3f} < {self.min_band_separation}")
        for group, members in self.merge_groups.items():
            if len(members) < 2:
                raise PhantomError(f"merge group {group!r} needs at least 2 members")
        for group in self.merged_prompts:
            if group not in self.merge_groups:
                raise PhantomError(f"merged prompt for unknown group {group!r}")


def load_registry(path=None) -> Registry:
    if path is None:
        raw = resources.files("promptseg").joinpath("data/registry.json").read_text("utf-8")
        obj = json.loads(raw)
    else:
        with open(path, encoding="utf-8") as fh:
            obj = json.load(fh)
    organs = [OrganSpec(
        name=o["name"],
        label=int(o["label"]),
        synonyms=list(o["synonyms"]),
        shape=o["shape"],
        center=tuple(o["center"]),
        center_jitter=int(o.get("center_jitter", 0)),
        size_range=tuple(o["size_range"]),
        intensity_band=tuple(o["intensity_band"]),
        merge_group=o.get("merge_group"),
    ) for o in obj["organs"]]
    return Registry(
        grid=tuple(obj["grid"]),
        background_intensity=float(obj["background_intensity"]),
        noise_sigma=float(obj["noise_sigma"]),
        presence_probability=float(obj["presence_probability"]),
        min_band_separation=float(obj.get("min_band_separation", 0.05)),
        templates=list(obj["templates"]),
        organs=organs,
        merged_prompts=dict(obj.get("merged_prompts", {})),
    )


@dataclass
class PhantomSample:
    volume: np.ndarray      # float64 grid in [0,1]
    label_map: np.ndarray   # int16 grid, 0 = background
    present: list           # names of organs present, registry order
    report: str = ""
    captions: list = field(default_factory=list)


def _rasterize(organ: OrganSpec, center, size, grid_shape) -> np.ndarray:
    zz, yy, xx = np.meshgrid(*(np.arange(n) for n in grid_shape), indexing="ij")
    dz, dy, dx = (zz - center[0], yy - center[1], xx - center[2])
    if organ.shape == "sphere":
        return dz * dz + dy * dy + dx * dx <= size * size
    if organ.shape == "box":
        return (np.abs(dz) <= size) & (np.abs(dy) <= size) & (np.abs(dx) <= size)
    # ellipsoid with fixed anisotropy so it is not a sphere in disguise
    a, b, c = size, 0.75 * size, 1.25 * size
    return (dz / a) ** 2 + (dy / b) ** 2 + (dx / c) ** 2 <= 1.0


def generate_phantom(registry: Registry, rng: np.random.Generator) -> PhantomSample:
    """One labeled volume: organs present independently with the registry
    probability; later organs win overlapping voxels; Gaussian noise on top."""
    shape = registry.grid
    volume = np.full(shape, registry.background_intensity, dtype=np.float64)
    label_map = np.zeros(shape, dtype=np.int16)
    present = []
    flags = [rng.random() < registry.presence_probability for _ in registry.organs]
    for organ, is_present in zip(registry.organs, flags):
        if not is_present:
            continue
        j = organ.center_jitter
        center = [c + int(rng.integers(-j, j + 1)) if j else c for c in organ.center]
        size = float(rng.uniform(*organ.size_range))
        mask = _rasterize(organ, center, size, shape)
        count = int(mask.sum())
        if count < MIN_ORGAN_VOXELS:
            raise PhantomError(
                f"organ {organ.name!r} rasterized to {count} voxels "
                f"(< {MIN_ORGAN_VOXELS}); size_range too small")
        intensity = float(rng.uniform(*organ.intensity_band))
        volume[mask] = intensity
        label_map[mask] = organ.label
        present.append(organ.name)
    volume += rng.normal(0.0, registry.noise_sigma, size=shape)
    np.clip(volume, 0.0, 1.0, out=volume)
    return PhantomSample(volume=volume, label_map=label_map, present=present)


def generate_report(sample: PhantomSample, registry: Registry,
                    rng: np.random.Generator, synonym_rate: float) -> tuple:
    """One caption per present organ; the organ name is swapped for a uniform
    synonym with probability synonym_rate. Report = captions joined by '. '."""
    if not registry.templates:
        raise PhantomError("no caption templates available")
    captions = []
    for name in sample.present:
        organ = registry.organ_by_name(name)
        template = registry.templates[int(rng.integers(len(registry.templates)))]
        use_synonym = organ.synonyms and rng.random() < synonym_rate
        mention = organ.synonyms[int(rng.integers(len(organ.synonyms)))] if use_synonym else name
        captions.append(template.replace("<name>", mention))
    return ". ".join(captions), captions


def merged_ground_truth(label_map: np.ndarray, group: str, registry: Registry) -> np.ndarray:
    """Voxelwise union of the group's member labels."""
    if group not in registry.merge_groups:
        raise PhantomError(f"unknown merge group {group!r}")
    mask = np.zeros(label_map.shape, dtype=bool)
    for name in registry.merge_groups[group]:
        mask |= label_map == registry.organ_by_name(name).label
    return mask


def build_corpus(registry: Registry, num_samples: int, base_seed: int,
                 synonym_rate: float, name: str = "phantom") -> list:
    """Deterministic corpus; per-sample derived seeds make order irrelevant."""
    samples = []
    for i in range(num_samples):
        rng = rng_for(base_seed, f"{name}-{i}")
        sample = generate_phantom(registry, rng)
        sample.report, sample.captions = generate_report(
            sample, registry, rng, synonym_rate)
        samples.append(sample)
    return samples


def to_report_records(samples) -> list:
    records = []
    for i, sample in enumerate(samples):
        if not sample.report:
            continue
        records.append(ReportRecord(
            id=f"phantom-{i:04d}",
            findings=sample.report,
            meta={"present": ",".join(sample.present)},
        ))
    return records


def lexicon_terms(registry: Registry) -> list:
    """All canonical names and synonyms; the phantom corpus lexicon."""
    terms = []
    for organ in registry.organs:
        terms.append(organ.name)
        terms.extend(organ.synonyms)
    return sorted(set(terms))
