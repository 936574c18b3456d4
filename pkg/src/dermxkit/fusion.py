"""Turn per-rater evaluations into training targets.

Only raters whose diagnosis matches the gold label contribute. A pixel of a
fuzzy map is the fraction of contributing raters whose outline covers it;
maps are stored as integer rater counts plus a denominator so every value
is an exact rational.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from . import bundle
from .constants import DISEASES
from .errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FusionConfig:
    # "correct": contributing raters only; "all": every retained evaluation.
    denominator: str = "correct"
    # Presence needs a drawn outline (True) or any tag (False).
    require_outline: bool = True
    # "bilinear" (antialiased when shrinking) or "area".
    resize_mode: str = "bilinear"

    def __post_init__(self):
        if self.denominator not in ("correct", "all"):
            raise ConfigError(f"fusion.denominator must be 'correct' or 'all', got {self.denominator!r}")
        if self.resize_mode not in ("bilinear", "area"):
            raise ConfigError(f"fusion.resize_mode must be 'bilinear' or 'area', got {self.resize_mode!r}")


@dataclass(frozen=True)
class FuzzyMask:
    values: np.ndarray
    characteristic: str
    image_id: str


@dataclass(frozen=True)
class FusedLabels:
    image_id: str
    gold_diagnosis: str
    characteristics: tuple
    presence: np.ndarray  # uint8, one entry per characteristic
    counts: dict = field(default_factory=dict)  # characteristic -> uint16 rater counts (or loader)
    denominator: int = 0
    diseases: tuple = DISEASES

    @property
    def diagnosis_index(self):
        return self.diseases.index(self.gold_diagnosis)

    @property
    def diagnosis_onehot(self):
        y = np.zeros(len(self.diseases), dtype=np.float32)
        y[self.diagnosis_index] = 1.0
        return y

    def fuzzy_map(self, name):
        counts = self.counts.get(name)
        if counts is None:
            return None
        if callable(counts):
            counts = counts()
        return FuzzyMask(counts.astype(np.float64) / self.denominator, name, self.image_id)

    @property
    def fuzzy_maps(self):
        return {name: self.fuzzy_map(name) for name in self.counts}


def _marks(ev, require_outline):
    return ev.outlined if require_outline else ev.selected


def fuse_labels(record, retained, config=FusionConfig()):
    retained = tuple(retained)
    if not retained:
        raise ValueError("retained characteristic set is empty")
    contributors = record.correct_evaluations()
    denominator = len(contributors) if config.denominator == "correct" else len(record.evaluations)

    presence = np.zeros(len(retained), dtype=np.uint8)
    counts = {}
    for ci, name in enumerate(retained):
        if any(name in _marks(ev, config.require_outline) for ev in contributors):
            presence[ci] = 1
        outlines = [ev.mask(name) for ev in contributors if name in ev.outlined]
        if presence[ci] and outlines:
            counts[name] = np.sum(outlines, axis=0, dtype=np.uint16)
    return FusedLabels(
        image_id=record.image_id,
        gold_diagnosis=record.gold_diagnosis,
        characteristics=retained,
        presence=presence,
        counts=counts,
        denominator=denominator,
    )


def characteristic_sample_counts(records, characteristics=None, config=FusionConfig()):
    """Number of images whose fused presence bit would be 1, per characteristic."""
    if characteristics is None:
        characteristics = observed_characteristics(records)
    counts = dict.fromkeys(characteristics, 0)
    for rec in records:
        marked = set()
        for ev in rec.correct_evaluations():
            marked |= _marks(ev, config.require_outline)
        for name in marked:
            if name in counts:
                counts[name] += 1
    return counts


def observed_characteristics(records):
    names = set()
    for rec in records:
        for ev in rec.evaluations:
            names |= ev.selected
    return tuple(sorted(names))


def select_characteristics(records, min_samples=30, min_pairwise_f1=0.30, config=FusionConfig()):
    """Characteristics with enough positive images and enough rater agreement."""
    from .agreement import binary_agreement

    if not records:
        return ()
    universe = observed_characteristics(records)
    samples = characteristic_sample_counts(records, universe, config)
    agreement = binary_agreement(records, universe)
    keep = []
    for name in universe:
        if samples[name] < min_samples:
            continue
        f1 = agreement[name].f1.mean
        if min_pairwise_f1 <= 0 or (not math.isnan(f1) and f1 >= min_pairwise_f1):
            keep.append(name)
    return tuple(keep)


def resize_map(values, target, mode="bilinear"):
    """Resize a 2-D map with linear interpolation (antialiased when shrinking)."""
    values = np.asarray(values, dtype=np.float64)
    target = tuple(int(t) for t in target)
    if min(target) < 1:
        raise ValueError(f"target size must be >= 1, got {target}")
    if values.shape == target:
        return values.copy()
    t = torch.from_numpy(values)[None, None]
    if mode == "area" and target[0] <= values.shape[0] and target[1] <= values.shape[1]:
        out = F.interpolate(t, size=target, mode="area")
    else:
        shrinking = target[0] < values.shape[0] or target[1] < values.shape[1]
        out = F.interpolate(t, size=target, mode="bilinear", align_corners=False, antialias=shrinking)
    return out[0, 0].numpy()


def downscale_fuzzy(mask, target, mode="bilinear"):
    """Resample a fuzzy map to ``target`` (h, w); values stay within [0, 1]."""
    if isinstance(mask, FuzzyMask):
        values = np.clip(resize_map(mask.values, target, mode), 0.0, 1.0)
        return FuzzyMask(values, mask.characteristic, mask.image_id)
    return np.clip(resize_map(mask, target, mode), 0.0, 1.0)


@dataclass(frozen=True)
class PrevalenceTable:
    diseases: tuple
    characteristics: tuple
    values: np.ndarray  # diseases x characteristics

    def __getitem__(self, key):
        disease, characteristic = key
        return float(self.values[self.diseases.index(disease), self.characteristics.index(characteristic)])

    def expected(self, disease, tau):
        row = self.values[self.diseases.index(disease)]
        return frozenset(c for c, v in zip(self.characteristics, row) if v >= tau)

    def rows(self, digits=2):
        """Characteristic-major rows rounded for reporting."""
        return [
            [c, *(round(float(self.values[d, j]), digits) for d in range(len(self.diseases)))]
            for j, c in enumerate(self.characteristics)
        ]


def prevalence_table(records, characteristics, diseases=DISEASES):
    characteristics = tuple(characteristics)
    selected = np.zeros((len(diseases), len(characteristics)))
    totals = np.zeros(len(diseases))
    for rec in records:
        d = diseases.index(rec.gold_diagnosis)
        for ev in rec.correct_evaluations():
            totals[d] += 1
            for j, c in enumerate(characteristics):
                if c in ev.selected:
                    selected[d, j] += 1
    values = np.zeros_like(selected)
    for d, disease in enumerate(diseases):
        if totals[d] == 0:
            logger.warning("no correct evaluations for %s; prevalence row is zero", disease)
        else:
            values[d] = selected[d] / totals[d]
    return PrevalenceTable(tuple(diseases), characteristics, values)


# -- label bundle -------------------------------------------------------------


@dataclass
class LabelSet:
    """Everything training and evaluation need: fused targets plus pixels."""

    characteristics: tuple
    diseases: tuple
    items: list  # FusedLabels, sorted by image_id
    pixels: dict  # image_id -> array or loader
    sources: dict
    prevalence: PrevalenceTable
    config: FusionConfig
    sample_counts: dict
    dataset_hash: str | None = None
    content_hash: str | None = None

    def __len__(self):
        return len(self.items)

    def by_id(self, image_id):
        return self._index()[image_id]

    def _index(self):
        if not hasattr(self, "_idx"):
            self._idx = {item.image_id: item for item in self.items}
        return self._idx

    def image(self, image_id):
        src = self.pixels[image_id]
        return np.asarray(src() if callable(src) else src)

    def gold_labels(self):
        return {item.image_id: item.gold_diagnosis for item in self.items}


def build_label_set(records, characteristics, config=FusionConfig(), dataset_hash=None):
    characteristics = tuple(characteristics)
    items = [fuse_labels(rec, characteristics, config) for rec in records]
    return LabelSet(
        characteristics=characteristics,
        diseases=DISEASES,
        items=sorted(items, key=lambda f: f.image_id),
        pixels={rec.image_id: rec.pixel_source for rec in records},
        sources={rec.image_id: rec.source for rec in records},
        prevalence=prevalence_table(records, characteristics),
        config=config,
        sample_counts=characteristic_sample_counts(records, characteristics, config),
        dataset_hash=dataset_hash,
    )


def save_labels(path, labels):
    arrays = {}
    entries = []
    for i, item in enumerate(labels.items):
        arrays[f"pixels/{i}"] = np.asarray(labels.image(item.image_id), dtype=np.uint8)
        maps = {}
        for name, counts in sorted(item.counts.items()):
            key = f"counts/{i}/{labels.characteristics.index(name)}"
            arrays[key] = np.asarray(counts() if callable(counts) else counts, dtype=np.uint16)
            maps[name] = key
        entries.append(
            {
                "image_id": item.image_id,
                "gold_diagnosis": item.gold_diagnosis,
                "source": labels.sources.get(item.image_id),
                "presence": item.presence.astype(int).tolist(),
                "denominator": item.denominator,
                "maps": maps,
            }
        )
    meta = {
        "kind": "labels",
        "format_version": 1,
        "characteristics": list(labels.characteristics),
        "diseases": list(labels.diseases),
        "fusion": {
            "denominator": labels.config.denominator,
            "require_outline": labels.config.require_outline,
            "resize_mode": labels.config.resize_mode,
        },
        "prevalence": labels.prevalence.values.tolist(),
        "sample_counts": labels.sample_counts,
        "dataset_hash": labels.dataset_hash,
        "images": entries,
    }
    labels.content_hash = bundle.write_bundle(path, meta, arrays)
    return labels.content_hash


def load_labels(path):
    meta, npz = bundle.open_bundle(path, kind="labels")
    characteristics = tuple(meta["characteristics"])
    diseases = tuple(meta["diseases"])
    items, pixels, sources = [], {}, {}
    for i, entry in enumerate(meta["images"]):
        items.append(
            FusedLabels(
                image_id=entry["image_id"],
                gold_diagnosis=entry["gold_diagnosis"],
                characteristics=characteristics,
                presence=np.asarray(entry["presence"], dtype=np.uint8),
                counts={name: (lambda key=key: npz[key]) for name, key in entry["maps"].items()},
                denominator=entry["denominator"],
                diseases=diseases,
            )
        )
        key = f"pixels/{i}"
        pixels[entry["image_id"]] = lambda key=key: npz[key]
        sources[entry["image_id"]] = entry["source"]
    return LabelSet(
        characteristics=characteristics,
        diseases=diseases,
        items=items,
        pixels=pixels,
        sources=sources,
        prevalence=PrevalenceTable(diseases, characteristics, np.asarray(meta["prevalence"])),
        config=FusionConfig(**meta["fusion"]),
        sample_counts=meta["sample_counts"],
        dataset_hash=meta.get("dataset_hash"),
        content_hash=meta["content_hash"],
    )
