"""Annotation ingestion and dataset cleaning.

The annotation index is a JSON file (see ``schema/annotations.schema.json``)
with one grayscale mask file per (evaluation, characteristic). A mask entry
of ``null`` means the characteristic was tagged without an outline.
"""

import functools
import json
import logging
from collections import defaultdict
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import jsonschema
import numpy as np
from PIL import Image

from . import bundle
from .constants import DISEASES, OTHER, SOURCES
from .errors import SchemaError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = "1.0"


@functools.lru_cache(maxsize=1)
def annotation_schema():
    text = resources.files("dermxkit").joinpath("schema/annotations.schema.json").read_text()
    return json.loads(text)


@dataclass(frozen=True)
class RawEvaluation:
    rater_id: str
    diagnosis: str | None
    low_quality: bool
    masks: dict  # characteristic -> Path | None


@dataclass(frozen=True)
class RawImageEntry:
    image_id: str
    source: str
    gold_diagnosis: str
    patient_id: str | None
    file_path: Path
    size: tuple  # (height, width)
    evaluations: tuple


@dataclass(frozen=True)
class RawAnnotationFile:
    schema_version: str
    images: tuple


def load_mask(path):
    """Read a single-channel 8-bit mask file as a boolean array (>=128 is present)."""
    with Image.open(path) as im:
        if im.mode not in ("L", "1"):
            raise SchemaError(f"{path}: mask must be single-channel 8-bit, got mode {im.mode}")
        return np.asarray(im.convert("L")) >= 128


def load_image(path):
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def _image_size(path):
    with Image.open(path) as im:
        return im.size[1], im.size[0]


def parse_annotations(path, images_root=None):
    """Parse and validate an annotation index.

    Paths inside the index are resolved against ``images_root`` (defaults to
    the index's directory). Only image headers are read here; pixel data and
    masks stay on disk until a record asks for them.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"annotation index not found: {path}")
    root = Path(images_root) if images_root is not None else path.parent
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON at line {exc.lineno} col {exc.colno}") from exc

    validator = jsonschema.Draft202012Validator(annotation_schema())
    errors = sorted(validator.iter_errors(doc), key=lambda e: list(e.absolute_path))
    if errors:
        first = errors[0]
        raise SchemaError(f"{path}: {first.json_path}: {first.message}")

    seen = set()
    images = []
    for entry in doc["images"]:
        image_id = entry["image_id"]
        if image_id in seen:
            raise SchemaError(f"duplicate image_id {image_id!r}")
        seen.add(image_id)

        file_path = root / entry["file_path"]
        if not file_path.exists():
            raise SchemaError(f"image {image_id!r}: file not found: {file_path}")
        size = _image_size(file_path)

        raters = set()
        evaluations = []
        for ev in entry["evaluations"]:
            rater = ev["rater_id"]
            if rater in raters:
                raise SchemaError(f"image {image_id!r}: rater {rater!r} evaluated it twice")
            raters.add(rater)
            if ev["low_quality"] and ev["masks"]:
                raise SchemaError(
                    f"image {image_id!r}, rater {rater!r}: low-quality evaluation carries masks"
                )
            if not ev["low_quality"] and ev["diagnosis"] is None:
                raise SchemaError(f"image {image_id!r}, rater {rater!r}: missing diagnosis")
            masks = {}
            for name, rel in ev["masks"].items():
                if rel is None:
                    masks[name] = None
                    continue
                mask_path = root / rel
                where = f"image {image_id!r}, rater {rater!r}, characteristic {name!r}"
                if not mask_path.exists():
                    raise SchemaError(f"{where}: dangling mask reference {rel}")
                msize = _image_size(mask_path)
                if msize != size:
                    raise SchemaError(f"{where}: mask is {msize[0]}x{msize[1]}, image is {size[0]}x{size[1]}")
                masks[name] = mask_path
            evaluations.append(RawEvaluation(rater, ev["diagnosis"], ev["low_quality"], masks))

        images.append(
            RawImageEntry(
                image_id=image_id,
                source=entry["source"],
                gold_diagnosis=entry["gold_diagnosis"],
                patient_id=entry.get("patient_id"),
                file_path=file_path,
                size=size,
                evaluations=tuple(evaluations),
            )
        )
    return RawAnnotationFile(doc["schema_version"], tuple(images))


def _resolve(source):
    return source() if callable(source) else source


@dataclass(frozen=True)
class Evaluation:
    """One rater's assessment of one image.

    ``characteristic_masks`` maps each selected characteristic to its outline
    (an array or a zero-argument loader), or to ``None`` for a tag without
    an outline.
    """

    rater_id: str
    diagnosis: str | None
    low_quality: bool = False
    characteristic_masks: dict = field(default_factory=dict)

    @property
    def selected(self):
        return frozenset(self.characteristic_masks)

    @property
    def outlined(self):
        return frozenset(k for k, v in self.characteristic_masks.items() if v is not None)

    def mask(self, name):
        src = self.characteristic_masks.get(name)
        if src is None:
            return None
        return np.asarray(_resolve(src), dtype=bool)


@dataclass(frozen=True)
class ImageRecord:
    image_id: str
    source: str
    gold_diagnosis: str
    shape: tuple  # (height, width)
    evaluations: tuple
    pixel_source: object = None
    patient_id: str | None = None

    @property
    def pixels(self):
        if self.pixel_source is None:
            raise ValueError(f"image {self.image_id!r} has no pixel data attached")
        return np.asarray(_resolve(self.pixel_source))

    @property
    def raters(self):
        return tuple(ev.rater_id for ev in self.evaluations)

    def correct_evaluations(self):
        return tuple(ev for ev in self.evaluations if ev.diagnosis == self.gold_diagnosis)


@dataclass
class CleaningLog:
    raw_images: int = 0
    all_other_dropped: int = 0
    gold_other_dropped: int = 0
    duplicate_patient_dropped: int = 0
    no_evaluations_dropped: int = 0
    low_quality_evaluations_dropped: int = 0
    retained_images: int = 0
    retained_evaluations: int = 0

    def is_consistent(self):
        dropped = (
            self.all_other_dropped
            + self.gold_other_dropped
            + self.duplicate_patient_dropped
            + self.no_evaluations_dropped
        )
        return self.raw_images == self.retained_images + dropped

    def as_dict(self):
        return dict(self.__dict__)


def _records_from_raw(raw):
    records = []
    for entry in raw.images:
        evaluations = tuple(
            Evaluation(
                rater_id=ev.rater_id,
                diagnosis=ev.diagnosis,
                low_quality=ev.low_quality,
                characteristic_masks={
                    name: (None if p is None else functools.partial(load_mask, p))
                    for name, p in ev.masks.items()
                },
            )
            for ev in entry.evaluations
        )
        records.append(
            ImageRecord(
                image_id=entry.image_id,
                source=entry.source,
                gold_diagnosis=entry.gold_diagnosis,
                shape=entry.size,
                evaluations=evaluations,
                pixel_source=functools.partial(load_image, entry.file_path),
                patient_id=entry.patient_id,
            )
        )
    return records


def clean_dataset(raw):
    """Apply the cleaning rules and return ``(records, log)``.

    Rules, in order: drop images that every (non-low-quality) rater called
    "other"; drop remaining images whose gold label is not a target disease;
    keep only the lexicographically first image per patient; discard
    low-quality evaluations; drop images left without evaluations.

    ``raw`` may be a :class:`RawAnnotationFile` or a list of records (which
    makes the function idempotent by construction).
    """
    records = _records_from_raw(raw) if isinstance(raw, RawAnnotationFile) else list(raw)
    log = CleaningLog(raw_images=len(records))

    kept = []
    for rec in records:
        diagnoses = [ev.diagnosis for ev in rec.evaluations if not ev.low_quality]
        if diagnoses and all(d == OTHER for d in diagnoses):
            log.all_other_dropped += 1
        elif rec.gold_diagnosis not in DISEASES:
            log.gold_other_dropped += 1
        else:
            kept.append(rec)

    by_patient = defaultdict(list)
    for rec in kept:
        if rec.patient_id is not None:
            by_patient[rec.patient_id].append(rec.image_id)
    first_of_patient = {pid: min(ids) for pid, ids in by_patient.items()}
    deduped = []
    for rec in kept:
        if rec.patient_id is not None and first_of_patient[rec.patient_id] != rec.image_id:
            log.duplicate_patient_dropped += 1
        else:
            deduped.append(rec)

    cleaned = []
    for rec in deduped:
        good = tuple(ev for ev in rec.evaluations if not ev.low_quality)
        log.low_quality_evaluations_dropped += len(rec.evaluations) - len(good)
        if not good:
            log.no_evaluations_dropped += 1
            logger.warning("image %s has no usable evaluations; dropped", rec.image_id)
            continue
        cleaned.append(
            ImageRecord(
                image_id=rec.image_id,
                source=rec.source,
                gold_diagnosis=rec.gold_diagnosis,
                shape=rec.shape,
                evaluations=good,
                pixel_source=rec.pixel_source,
                patient_id=rec.patient_id,
            )
        )

    cleaned.sort(key=lambda r: r.image_id)
    log.retained_images = len(cleaned)
    log.retained_evaluations = sum(len(r.evaluations) for r in cleaned)
    return cleaned, log


@dataclass(frozen=True)
class CountTable:
    """Image counts by disease (rows) and source (columns), totals excluded."""

    diseases: tuple
    sources: tuple
    counts: np.ndarray

    @property
    def row_totals(self):
        return self.counts.sum(axis=1)

    @property
    def column_totals(self):
        return self.counts.sum(axis=0)

    @property
    def total(self):
        return int(self.counts.sum())

    def cell(self, disease, source):
        return int(self.counts[self.diseases.index(disease), self.sources.index(source)])

    def rows(self):
        """Source-major rows with a trailing total row."""
        out = []
        for j, src in enumerate(self.sources):
            out.append([src, *map(int, self.counts[:, j]), int(self.column_totals[j])])
        out.append(["Total", *map(int, self.row_totals), self.total])
        return out


def dataset_stats(records):
    counts = np.zeros((len(DISEASES), len(SOURCES)), dtype=np.int64)
    for rec in records:
        counts[DISEASES.index(rec.gold_diagnosis), SOURCES.index(rec.source)] += 1
    return CountTable(DISEASES, SOURCES, counts)


# -- dataset bundle ---------------------------------------------------------


def save_dataset(path, records, log=None):
    """Serialise cleaned records (pixels and masks included) to a bundle."""
    arrays = {}
    entries = []
    for i, rec in enumerate(records):
        arrays[f"pixels/{i}"] = np.asarray(rec.pixels, dtype=np.uint8)
        evs = []
        for j, ev in enumerate(rec.evaluations):
            masks = {}
            for k, name in enumerate(sorted(ev.characteristic_masks)):
                m = ev.mask(name)
                if m is None:
                    masks[name] = None
                else:
                    key = f"mask/{i}/{j}/{k}"
                    arrays[key] = m.astype(np.uint8)
                    masks[name] = key
            evs.append(
                {"rater_id": ev.rater_id, "diagnosis": ev.diagnosis,
                 "low_quality": ev.low_quality, "masks": masks}
            )
        entries.append(
            {
                "image_id": rec.image_id,
                "source": rec.source,
                "gold_diagnosis": rec.gold_diagnosis,
                "patient_id": rec.patient_id,
                "shape": list(rec.shape),
                "evaluations": evs,
            }
        )
    meta = {
        "kind": "dataset",
        "format_version": 1,
        "images": entries,
        "cleaning_log": None if log is None else log.as_dict(),
    }
    return bundle.write_bundle(path, meta, arrays)


def _npz_loader(npz, key, dtype):
    def load():
        return npz[key].astype(dtype)

    return load


def load_dataset(path):
    """Load a dataset bundle. Returns ``(records, meta)``; arrays load lazily."""
    meta, npz = bundle.open_bundle(path, kind="dataset")
    records = []
    for i, entry in enumerate(meta["images"]):
        evaluations = tuple(
            Evaluation(
                rater_id=ev["rater_id"],
                diagnosis=ev["diagnosis"],
                low_quality=ev["low_quality"],
                characteristic_masks={
                    name: (None if key is None else _npz_loader(npz, key, bool))
                    for name, key in ev["masks"].items()
                },
            )
            for ev in entry["evaluations"]
        )
        records.append(
            ImageRecord(
                image_id=entry["image_id"],
                source=entry["source"],
                gold_diagnosis=entry["gold_diagnosis"],
                shape=tuple(entry["shape"]),
                evaluations=evaluations,
                pixel_source=_npz_loader(npz, f"pixels/{i}", np.uint8),
                patient_id=entry["patient_id"],
            )
        )
    return records, meta
