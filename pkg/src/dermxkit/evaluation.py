"""Explanation quality: identification, localization, faithfulness, precision.

Everything here runs on a frozen model in eval mode. Per-fold results are
kept as plain records so reports can be aggregated across folds later.
"""

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from . import model as M
from .fusion import resize_map
from .metrics import BinaryMetrics, FuzzySums, aggregate, binary_prf, fuzzy_sums
from .training import predict_split, prepare_split

logger = logging.getLogger(__name__)

THRESHOLD = 0.5
CAM_BINARIZE = 0.5
TAU = 0.05
LOCALIZATION_MODES = ("agreed_only", "all_labeled")


@dataclass
class Predictions:
    ids: list
    dx_probs: np.ndarray  # (N, D)
    char_probs: np.ndarray | None  # (N, C)
    y: np.ndarray  # gold diagnosis index per image
    z: np.ndarray  # (N, C) fused presence bits

    @property
    def dx_pred(self):
        return self.dx_probs.argmax(1)

    def char_pred(self, threshold=THRESHOLD):
        if self.char_probs is None:
            return None
        return self.char_probs >= threshold


def collect_predictions(model, labels, ids=None):
    ids = list(ids) if ids is not None else [it.image_id for it in labels.items]
    split = prepare_split(labels, ids, model.config.input_size)
    dx, zp = predict_split(model, split)
    return Predictions(
        ids=ids,
        dx_probs=dx.numpy(),
        char_probs=None if zp is None else zp.numpy(),
        y=split.y.argmax(1).numpy(),
        z=split.z.numpy() > 0,
    )


# -- identification -------------------------------------------------------------------


def identification_metrics(pred, target, characteristics):
    """Per-characteristic BinaryMetrics for one fold; thresholded predictions in, bits out."""
    pred = np.asarray(pred, dtype=bool)
    target = np.asarray(target, dtype=bool)
    return {name: binary_prf(pred[:, ci], target[:, ci]) for ci, name in enumerate(characteristics)}


@dataclass
class MetricRow:
    name: str
    f1: object  # Summary
    sensitivity: object
    specificity: object
    support: int


def summarize_folds(per_fold, characteristics):
    """Mean ± std over folds per characteristic, plus a macro row.

    ``per_fold`` is a list of ``{characteristic: BinaryMetrics}``. A
    characteristic undefined in a fold is excluded from that fold's
    aggregate. The macro row averages characteristics within each fold and
    then summarises those fold means.
    """
    rows = []
    for name in characteristics:
        ms = [fold[name] for fold in per_fold if name in fold]
        rows.append(
            MetricRow(
                name,
                aggregate(m.f1 for m in ms),
                aggregate(m.sensitivity for m in ms),
                aggregate(m.specificity for m in ms),
                int(sum(m.support for m in ms)),
            )
        )

    def fold_mean(fold, attr):
        return aggregate(getattr(fold[n], attr) for n in characteristics if n in fold).mean

    rows.append(
        MetricRow(
            "mean",
            aggregate(fold_mean(f, "f1") for f in per_fold),
            aggregate(fold_mean(f, "sensitivity") for f in per_fold),
            aggregate(fold_mean(f, "specificity") for f in per_fold),
            int(sum(r.support for r in rows)),
        )
    )
    return rows


def identification_report(model, labels, ids, threshold=THRESHOLD):
    """Per-characteristic metrics of thresholded ẑ against fused presence bits."""
    preds = collect_predictions(model, labels, ids)
    if preds.char_probs is None:
        raise ValueError(f"model kind {model.kind!r} has no characteristic head")
    return identification_metrics(preds.char_pred(threshold), preds.z, labels.characteristics)


# -- localization -----------------------------------------------------------------------


def attention_maps(model, image, class_indices, head="characteristic"):
    """Grad-CAM maps (len(class_indices), h, w) for one uint8 image."""
    if not class_indices:
        h, w = model.attention_size
        return np.zeros((0, h, w))
    x = M.to_input(image, model.config.input_size)[None]
    model.eval()
    with torch.enable_grad():
        features = model.backbone(x).detach()
        cams = M.grad_cam_from_features(model, features, list(class_indices), head)
    return cams[0].detach().numpy().astype(np.float64)


@dataclass(frozen=True)
class LocalizationScore:
    image_id: str
    characteristic: str
    f1: float
    sensitivity: float
    specificity: float
    sums: FuzzySums | None = None


@dataclass
class LocalizationResult:
    mode: str
    eval_at: str
    scores: list = field(default_factory=list)
    skipped_missing_map: dict = field(default_factory=dict)

    def per_characteristic(self, characteristics, pooled=False):
        """{characteristic: BinaryMetrics} averaged over images (support = #images).

        With ``pooled`` the pixel sums of all images are added first and the
        metrics computed once per characteristic.
        """
        out = {}
        for name in characteristics:
            rows = [s for s in self.scores if s.characteristic == name]
            if not rows:
                continue
            if pooled:
                total = sum((s.sums for s in rows[1:]), rows[0].sums)
                out[name] = BinaryMetrics(total.f1, total.sensitivity, total.specificity, len(rows))
                continue
            out[name] = BinaryMetrics(
                aggregate(s.f1 for s in rows).mean,
                aggregate(s.sensitivity for s in rows).mean,
                aggregate(s.specificity for s in rows).mean,
                len(rows),
            )
        return out


def _compare(A, Mv, eval_at):
    if eval_at == "image":
        A = np.clip(resize_map(A, Mv.shape), 0.0, 1.0)
    else:
        Mv = np.clip(resize_map(Mv, A.shape), 0.0, 1.0)
    return fuzzy_sums(A, Mv)


def localization_report(model, labels, ids, mode="agreed_only", eval_at="image", threshold=THRESHOLD):
    """Fuzzy overlap of Grad-CAM maps with fused reference maps.

    ``agreed_only`` scores pairs with ẑ ≥ threshold and z = 1; ``all_labeled``
    scores every z = 1 pair. ``eval_at="image"`` upsamples A to the reference
    resolution, ``"feature"`` downsamples M to the map grid.
    """
    if mode not in LOCALIZATION_MODES:
        raise ValueError(f"mode must be one of {LOCALIZATION_MODES}, got {mode!r}")
    if eval_at not in ("image", "feature"):
        raise ValueError(f"eval_at must be 'image' or 'feature', got {eval_at!r}")
    preds = collect_predictions(model, labels, ids)
    if preds.char_probs is None:
        raise ValueError(f"model kind {model.kind!r} has no characteristic head")
    zhat = preds.char_pred(threshold)
    result = LocalizationResult(mode, eval_at)
    for i, image_id in enumerate(preds.ids):
        item = labels.by_id(image_id)
        wanted = [ci for ci in range(len(labels.characteristics)) if preds.z[i, ci]]
        if mode == "agreed_only":
            wanted = [ci for ci in wanted if zhat[i, ci]]
        todo = []
        for ci in wanted:
            name = labels.characteristics[ci]
            fm = item.fuzzy_map(name)
            if fm is None:
                result.skipped_missing_map[name] = result.skipped_missing_map.get(name, 0) + 1
            else:
                todo.append((ci, fm.values))
        if not todo:
            continue
        cams = attention_maps(model, labels.image(image_id), [ci for ci, _ in todo])
        for (ci, ref), A in zip(todo, cams):
            sums = _compare(A, ref, eval_at)
            result.scores.append(
                LocalizationScore(
                    image_id, labels.characteristics[ci], sums.f1, sums.sensitivity, sums.specificity, sums
                )
            )
    for name, n in result.skipped_missing_map.items():
        logger.warning("%d labelled %s pairs have no fuzzy map; skipped", n, name)
    return result


def upsampled_attention(model, image, class_index, head="characteristic"):
    """One Grad-CAM map resized to the image's own resolution."""
    A = attention_maps(model, image, [class_index], head)[0]
    return np.clip(resize_map(A, np.asarray(image).shape[:2]), 0.0, 1.0)


# -- faithfulness -------------------------------------------------------------------------


@dataclass(frozen=True)
class FaithfulnessRecord:
    image_id: str
    predicted_class: int
    m_x: float
    m_xe: float
    F: float
    occlusion_source: str
    outlines: tuple = ()  # binary masks at image resolution

    @property
    def occluded_fraction(self):
        if not self.outlines:
            return 0.0
        return float(np.mean(np.logical_or.reduce([np.asarray(o, bool) for o in self.outlines])))


def union(outlines, shape):
    out = np.zeros(shape, dtype=bool)
    for o in outlines:
        o = np.asarray(o, dtype=bool)
        if o.shape != tuple(shape):
            raise ValueError(f"outline shape {o.shape} does not match image {tuple(shape)}")
        out |= o
    return out


def occlude(image, outlines, fill):
    """Copy of ``image`` with every pixel inside the union of ``outlines`` set to ``fill``."""
    image = np.asarray(image)
    x_e = image.copy()
    region = union(outlines, image.shape[:2])
    x_e[region] = np.asarray(fill, dtype=image.dtype)
    return x_e


def dataset_mean_color(labels, ids=None):
    ids = ids if ids is not None else [it.image_id for it in labels.items]
    total = np.zeros(3)
    count = 0
    for image_id in ids:
        img = labels.image(image_id).reshape(-1, 3)
        total += img.sum(0)
        count += len(img)
    return np.round(total / max(count, 1)).astype(np.uint8)


@torch.no_grad()
def _probs(model, image):
    model.eval()
    return model(M.to_input(image, model.config.input_size)[None]).diagnosis_probs[0]


def faithfulness(model, image, outlines, fill=(0, 0, 0), image_id="", occlusion_source="model", predicted_class=None):
    """F = m(x) - m(x_e) for the class predicted on the original image."""
    image = np.asarray(image)
    outlines = tuple(np.asarray(o, dtype=bool) for o in outlines)
    p = _probs(model, image)
    cls = int(p.argmax()) if predicted_class is None else int(predicted_class)
    m_x = float(p[cls])
    if not union(outlines, image.shape[:2]).any():
        return FaithfulnessRecord(image_id, cls, m_x, m_x, 0.0, occlusion_source, outlines)
    m_xe = float(_probs(model, occlude(image, outlines, fill))[cls])
    return FaithfulnessRecord(image_id, cls, m_x, m_xe, m_x - m_xe, occlusion_source, outlines)


def model_outlines(model, image, threshold=THRESHOLD, binarize=CAM_BINARIZE):
    """Binary outlines from the model's own Grad-CAMs at image resolution.

    Characteristic models outline every characteristic with ẑ ≥ threshold;
    the diagnosis-only model outlines its predicted class. Each map is cut at
    ``binarize`` × its maximum.
    """
    image = np.asarray(image)
    with torch.no_grad():
        out = model(M.to_input(image, model.config.input_size)[None])
    if out.characteristic_probs is not None:
        classes = [int(c) for c in torch.nonzero(out.characteristic_probs[0] >= threshold).flatten()]
        head = "characteristic"
    else:
        classes = [int(out.diagnosis_probs[0].argmax())]
        head = "diagnosis"
    if not classes:
        return ()
    cams = attention_maps(model, image, classes, head)
    outlines = []
    for A in cams:
        up = np.clip(resize_map(A, image.shape[:2]), 0.0, 1.0)
        peak = up.max()
        if peak > 0:
            outlines.append(up >= binarize * peak)
    return tuple(outlines)


def expert_outlines(item):
    """Every pixel at least one contributing rater outlined, per present characteristic."""
    outlines = []
    for ci, name in enumerate(item.characteristics):
        fm = item.fuzzy_map(name)
        if item.presence[ci] and fm is not None:
            outlines.append(fm.values > 0)
    return tuple(outlines)


def faithfulness_report(model, labels, ids, source="model", fill="mean", threshold=THRESHOLD, binarize=CAM_BINARIZE):
    if source not in ("model", "expert"):
        raise ValueError(f"occlusion source must be 'model' or 'expert', got {source!r}")
    if isinstance(fill, str):
        if fill == "mean":
            fill = dataset_mean_color(labels)
        elif fill == "black":
            fill = (0, 0, 0)
        else:
            raise ValueError(f"fill must be 'mean', 'black' or an RGB triple, got {fill!r}")
    records = []
    for image_id in ids:
        image = labels.image(image_id)
        if source == "model":
            e = model_outlines(model, image, threshold, binarize)
        else:
            e = expert_outlines(labels.by_id(image_id))
        records.append(faithfulness(model, image, e, fill, image_id, source))
    return records


# -- explanation precision -------------------------------------------------------------------


def explanation_precision(predicted, expected):
    """|predicted ∩ expected| / |predicted|; nan when nothing was predicted."""
    predicted = set(predicted)
    if not predicted:
        return math.nan
    return len(predicted & set(expected)) / len(predicted)


@dataclass(frozen=True)
class ExplanationPrecisionRecord:
    image_id: str
    predicted_diagnosis: str
    gold_diagnosis: str
    predicted_characteristics: frozenset
    expected_set: frozenset
    precision: float

    @property
    def correct(self):
        return self.predicted_diagnosis == self.gold_diagnosis


@dataclass
class PrecisionSummary:
    correct: object  # Summary
    incorrect: object
    excluded_correct: int
    excluded_incorrect: int
    tau: float
    correct_reference: str
    records: list


def precision_records(preds, labels, tau=TAU, threshold=THRESHOLD, correct_reference="labels"):
    """Explanation precision per image.

    Wrong diagnoses are always scored against the expected set of the
    predicted disease (prevalence ≥ tau). Correct diagnoses are scored
    against the image's own fused labels by default
    (``correct_reference="labels"``) or against the expected set
    (``"expected"``).
    """
    if correct_reference not in ("labels", "expected"):
        raise ValueError(f"correct_reference must be 'labels' or 'expected', got {correct_reference!r}")
    if preds.char_probs is None:
        raise ValueError("predictions carry no characteristic probabilities")
    chars = labels.characteristics
    zhat = preds.char_pred(threshold)
    out = []
    for i, image_id in enumerate(preds.ids):
        dx = labels.diseases[int(preds.dx_pred[i])]
        gold = labels.diseases[int(preds.y[i])]
        predicted = frozenset(c for c, on in zip(chars, zhat[i]) if on)
        if dx == gold and correct_reference == "labels":
            reference = frozenset(c for c, on in zip(chars, preds.z[i]) if on)
        else:
            reference = labels.prevalence.expected(dx, tau)
        out.append(
            ExplanationPrecisionRecord(image_id, dx, gold, predicted, reference, explanation_precision(predicted, reference))
        )
    return out


def summarize_precision(records, tau=TAU, correct_reference="labels"):
    right = [r.precision for r in records if r.correct]
    wrong = [r.precision for r in records if not r.correct]
    c, w = aggregate(right), aggregate(wrong)
    return PrecisionSummary(c, w, c.excluded, w.excluded, tau, correct_reference, list(records))


def diagnosis_metrics(preds, diseases):
    """One-vs-rest BinaryMetrics per disease for the diagnosis head."""
    pred = preds.dx_pred
    return {d: binary_prf(pred == k, preds.y == k) for k, d in enumerate(diseases)}
