"""Rater-vs-gold diagnosis performance and pairwise rater agreement."""

import itertools
import logging
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .constants import DISEASES
from .metrics import aggregate, binary_prf, cohens_kappa, fuzzy_sums

logger = logging.getLogger(__name__)


@dataclass
class DiagnosisAgreement:
    per_rater: dict  # rater -> disease -> BinaryMetrics
    selections: dict  # rater -> disease -> int
    f1: dict  # disease -> Summary across raters
    sensitivity: dict
    specificity: dict
    selection: dict
    mean_f1: object = None  # Summary over per-disease mean F1
    mean_sensitivity: object = None
    mean_specificity: object = None
    mean_selection: object = None


def _rater_views(records):
    """rater -> {image_id: Evaluation} over the given records."""
    views = defaultdict(dict)
    for rec in records:
        for ev in rec.evaluations:
            views[ev.rater_id][rec.image_id] = ev
    return dict(sorted(views.items()))


def diagnosis_agreement(records, diseases=DISEASES):
    gold = {rec.image_id: rec.gold_diagnosis for rec in records}
    views = _rater_views(records)
    per_rater, selections = {}, {}
    for rater, evs in views.items():
        if not evs:
            logger.warning("rater %s has no evaluations; omitted", rater)
            continue
        ids = sorted(evs)
        said = np.array([evs[i].diagnosis for i in ids], dtype=object)
        truth = np.array([gold[i] for i in ids], dtype=object)
        per_rater[rater] = {d: binary_prf(said == d, truth == d) for d in diseases}
        selections[rater] = {d: int(np.sum(said == d)) for d in diseases}

    def across(getter):
        return {d: aggregate(getter(r, d) for r in per_rater) for d in diseases}

    result = DiagnosisAgreement(
        per_rater=per_rater,
        selections=selections,
        f1=across(lambda r, d: per_rater[r][d].f1),
        sensitivity=across(lambda r, d: per_rater[r][d].sensitivity),
        specificity=across(lambda r, d: per_rater[r][d].specificity),
        selection=across(lambda r, d: selections[r][d]),
    )
    result.mean_f1 = aggregate(result.f1[d].mean for d in diseases)
    result.mean_sensitivity = aggregate(result.sensitivity[d].mean for d in diseases)
    result.mean_specificity = aggregate(result.specificity[d].mean for d in diseases)
    result.mean_selection = aggregate(result.selection[d].mean for d in diseases)
    return result


@dataclass
class BinaryAgreement:
    f1: object
    sensitivity: object
    specificity: object
    kappa: object
    selection: object
    pairs: int
    pair_values: dict = field(default_factory=dict)  # (r1, r2) -> (f1, kappa)


def binary_agreement(records, characteristics=None):
    """Pairwise presence agreement per characteristic.

    Presence is "the rater selected the characteristic", whatever diagnosis
    the rater gave. Sensitivity and specificity are averaged over both
    orderings of each pair.
    """
    views = _rater_views(records)
    if characteristics is None:
        characteristics = sorted({c for evs in views.values() for ev in evs.values() for c in ev.selected})
    raters = list(views)
    out = {}
    for name in characteristics:
        pair_values = {}
        f1s, kappas, sens, spec = [], [], [], []
        for r1, r2 in itertools.combinations(raters, 2):
            shared = sorted(views[r1].keys() & views[r2].keys())
            if not shared:
                continue
            a = np.array([name in views[r1][i].selected for i in shared])
            b = np.array([name in views[r2][i].selected for i in shared])
            m_ab, m_ba = binary_prf(a, b), binary_prf(b, a)
            kappa = cohens_kappa(a, b)
            f1s.append(m_ab.f1)
            kappas.append(kappa)
            sens.append(_mean_defined(m_ab.sensitivity, m_ba.sensitivity))
            spec.append(_mean_defined(m_ab.specificity, m_ba.specificity))
            pair_values[(r1, r2)] = (m_ab.f1, kappa)
        selection = [sum(name in ev.selected for ev in views[r].values()) for r in raters]
        out[name] = BinaryAgreement(
            f1=aggregate(f1s),
            sensitivity=aggregate(sens),
            specificity=aggregate(spec),
            kappa=aggregate(kappas),
            selection=aggregate(selection),
            pairs=len(pair_values),
            pair_values=pair_values,
        )
    return out


def _mean_defined(*values):
    defined = [v for v in values if not np.isnan(v)]
    return float(np.mean(defined)) if defined else np.nan


@dataclass
class LocalizationAgreement:
    f1: object
    sensitivity: object
    specificity: object
    pairs: int
    images: int


def localization_agreement(records, characteristics=None):
    """Pairwise fuzzy overlap of outlines, on images both raters outlined.

    Scores are averaged per pair over shared images, then summarised across
    pairs. Diagnosis correctness is not required of either rater.
    """
    per_pair = defaultdict(lambda: defaultdict(list))  # name -> pair -> [(f1, sens, spec)]
    image_counts = defaultdict(int)
    for rec in records:
        names = set()
        for ev in rec.evaluations:
            names |= ev.outlined
        if characteristics is not None:
            names &= set(characteristics)
        for name in sorted(names):
            masks = {ev.rater_id: ev.mask(name) for ev in rec.evaluations if name in ev.outlined}
            if len(masks) < 2:
                continue
            image_counts[name] += 1
            for r1, r2 in itertools.combinations(sorted(masks), 2):
                s12 = fuzzy_sums(masks[r1], masks[r2])
                s21 = fuzzy_sums(masks[r2], masks[r1])
                per_pair[name][(r1, r2)].append(
                    (
                        s12.f1,
                        _mean_defined(s12.sensitivity, s21.sensitivity),
                        _mean_defined(s12.specificity, s21.specificity),
                    )
                )

    names = characteristics if characteristics is not None else sorted(per_pair)
    out = {}
    for name in names:
        pairs = per_pair.get(name, {})
        means = [np.nanmean(np.array(v, dtype=float), axis=0) for v in pairs.values()]
        cols = np.array(means).reshape(-1, 3)
        out[name] = LocalizationAgreement(
            f1=aggregate(cols[:, 0]),
            sensitivity=aggregate(cols[:, 1]),
            specificity=aggregate(cols[:, 2]),
            pairs=len(pairs),
            images=image_counts.get(name, 0),
        )
    return out


@dataclass
class AgreementReport:
    diagnosis: DiagnosisAgreement
    characteristic_binary: dict
    characteristic_localization: dict
    characteristics: tuple
    notes: dict = field(default_factory=dict)


def agreement_report(records, characteristics=None):
    if characteristics is None:
        characteristics = sorted({c for rec in records for ev in rec.evaluations for c in ev.selected})
    characteristics = tuple(characteristics)
    return AgreementReport(
        diagnosis=diagnosis_agreement(records),
        characteristic_binary=binary_agreement(records, characteristics),
        characteristic_localization=localization_agreement(records, characteristics),
        characteristics=characteristics,
        notes={
            "binary_presence": "rater selected the characteristic, any diagnosis",
            "localization_pairs": "both raters outlined the characteristic; diagnosis correctness not required",
            "pair_direction": "sensitivity/specificity averaged over both rater orders",
            "std": "population",
        },
    )
