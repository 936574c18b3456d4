"""Planted-blob synthetic datasets.

Each characteristic is a solid coloured disc; each disease is a fixed set of
characteristics. Simulated raters diagnose (mostly correctly) and outline
the discs with jittered radii. Useful for smoke tests and demos where the
right answer is known by construction.
"""

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .ingest import SCHEMA_VERSION, Evaluation, ImageRecord

BLOB_COLORS = {
    "plaque": (200, 40, 40),
    "pustule": (230, 220, 60),
    "scale": (60, 60, 220),
    "patch": (40, 180, 60),
}

SIGNATURES = {
    "acne": ("pustule",),
    "psoriasis": ("plaque", "scale"),
    "vitiligo": ("patch",),
    "viral warts": ("pustule", "patch"),
}

BACKGROUND = (150, 120, 110)


@dataclass
class SyntheticDataset:
    records: list
    true_masks: dict  # image_id -> {characteristic: bool mask}
    characteristics: tuple


def _disc(size, cy, cx, r):
    yy, xx = np.mgrid[:size, :size]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def planted_blob_dataset(
    n_images=32,
    size=32,
    n_raters=8,
    seed=0,
    p_correct=0.9,
    p_select=0.9,
    jitter=1,
    signatures=None,
    noise=6.0,
):
    signatures = signatures or SIGNATURES
    rng = np.random.default_rng(seed)
    diseases = sorted(signatures)
    characteristics = tuple(sorted({c for s in signatures.values() for c in s}))
    records, truth = [], {}
    for i in range(n_images):
        disease = diseases[i % len(diseases)]
        image_id = f"img{i:04d}"
        pixels = np.empty((size, size, 3))
        pixels[:] = BACKGROUND
        pixels += rng.normal(0, noise, pixels.shape)
        masks = {}
        placed = []
        for name in signatures[disease]:
            r = rng.uniform(size / 9, size / 6)
            for _ in range(100):
                cy, cx = rng.uniform(r, size - r, 2)
                if all((cy - py) ** 2 + (cx - px) ** 2 > (r + pr + 1) ** 2 for py, px, pr in placed):
                    break
            placed.append((cy, cx, r))
            m = _disc(size, cy, cx, r)
            pixels[m] = BLOB_COLORS.get(name, (255, 255, 255))
            masks[name] = m
        pixels = np.clip(pixels, 0, 255).astype(np.uint8)
        truth[image_id] = masks

        evaluations = []
        for k in range(n_raters):
            if rng.random() < p_correct:
                said = disease
            else:
                said = rng.choice([d for d in diseases if d != disease])
            outlines = {}
            for name in signatures[disease]:
                if rng.random() >= p_select:
                    continue
                cy, cx, r = placed[signatures[disease].index(name)]
                dy, dx, dr = rng.integers(-jitter, jitter + 1, 3)
                outlines[name] = _disc(size, cy + dy, cx + dx, max(1.0, r + dr))
            evaluations.append(Evaluation(f"rater{k}", str(said), False, outlines))
        records.append(
            ImageRecord(
                image_id=image_id,
                source="DermNetNZ" if i % 2 == 0 else "SD260",
                gold_diagnosis=disease,
                shape=(size, size),
                evaluations=tuple(evaluations),
                pixel_source=pixels,
                patient_id=None,
            )
        )
    return SyntheticDataset(records, truth, characteristics)


def write_annotation_index(records, out_dir, extra_images=()):
    """Write records as an annotation index plus PNG image and mask files.

    ``extra_images`` are raw index entries appended verbatim (for fixtures
    exercising cleaning rules). Returns the index path.
    """
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in records:
        img_rel = f"images/{rec.image_id}.png"
        Image.fromarray(rec.pixels).save(out_dir / img_rel)
        evs = []
        for ev in rec.evaluations:
            masks = {}
            for name in sorted(ev.characteristic_masks):
                m = ev.mask(name)
                if m is None:
                    masks[name] = None
                    continue
                rel = f"masks/{rec.image_id}__{ev.rater_id}__{name.replace(' ', '_')}.png"
                Image.fromarray(m.astype(np.uint8) * 255).save(out_dir / rel)
                masks[name] = rel
            evs.append(
                {"rater_id": ev.rater_id, "diagnosis": ev.diagnosis, "low_quality": ev.low_quality, "masks": masks}
            )
        entry = {
            "image_id": rec.image_id,
            "source": rec.source,
            "gold_diagnosis": rec.gold_diagnosis,
            "file_path": img_rel,
            "evaluations": evs,
        }
        if rec.patient_id is not None:
            entry["patient_id"] = rec.patient_id
        entries.append(entry)
    entries.extend(extra_images)
    index = out_dir / "annotations.json"
    index.write_text(json.dumps({"schema_version": SCHEMA_VERSION, "images": entries}, indent=1))
    return index
