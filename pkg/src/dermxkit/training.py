"""Cross-validation folds, augmentation, the training loop and feature baselines."""

import csv
import dataclasses
import hashlib
import io
import json
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torchvision.transforms.v2 import functional as TF

from . import model as M
from .bundle import atomic_write_bytes, canonical_json
from .errors import ConfigError, TrainingError
from .fusion import resize_map
from .metrics import aggregate, binary_prf, macro_f1

logger = logging.getLogger(__name__)


# -- folds --------------------------------------------------------------------


@dataclass(frozen=True)
class FoldPlan:
    seed: int
    k: int
    assignments: dict  # image_id -> fold index

    def test_ids(self, fold):
        return sorted(i for i, f in self.assignments.items() if f == fold)

    def train_ids(self, fold):
        return sorted(i for i, f in self.assignments.items() if f != fold)

    def to_json(self):
        return canonical_json({"seed": self.seed, "k": self.k, "assignments": self.assignments})

    @property
    def digest(self):
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def save(self, path):
        atomic_write_bytes(path, (self.to_json() + "\n").encode())

    @classmethod
    def load(cls, path):
        doc = json.loads(Path(path).read_text())
        return cls(int(doc["seed"]), int(doc["k"]), {str(k): int(v) for k, v in doc["assignments"].items()})


def make_folds(labels, k=10, seed=0):
    """Stratified k-fold assignment.

    ``labels`` maps image_id -> class (or is a sequence of objects with
    ``image_id`` and ``gold_diagnosis``). Within each class, ids are sorted,
    shuffled with ``seed`` and dealt round-robin; the dealing position carries
    over between classes so overall fold sizes also differ by at most one.
    """
    if not isinstance(labels, dict):
        labels = {r.image_id: r.gold_diagnosis for r in labels}
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    by_class = {}
    for image_id, cls in labels.items():
        by_class.setdefault(cls, []).append(image_id)
    assignments = {}
    position = 0
    for cls in sorted(by_class):
        ids = sorted(by_class[cls])
        order = rng.permutation(len(ids))
        for j in order:
            assignments[ids[j]] = position % k
            position += 1
    return FoldPlan(seed, k, dict(sorted(assignments.items())))


# -- configuration --------------------------------------------------------------


@dataclass
class AugmentationConfig:
    rotation: float = 10.0  # degrees
    zoom: float = 0.15
    brightness: float = 0.35
    contrast: float = 0.20
    saturation: float = 0.20
    scale: tuple = (0.85, 1.15)
    translate: tuple = (0.15, 0.15)  # fraction of width, height
    hue: float = 0.15

    def __post_init__(self):
        self.scale = tuple(float(v) for v in self.scale)
        self.translate = tuple(float(v) for v in self.translate)
        magnitudes = [self.rotation, self.zoom, self.brightness, self.contrast,
                      self.saturation, self.hue, *self.translate, *self.scale]
        if any(v < 0 for v in magnitudes):
            raise ConfigError("augmentation magnitudes must be non-negative")
        if self.scale[0] > self.scale[1]:
            raise ConfigError("augmentation scale must be (low, high)")
        if self.hue > 0.5:
            raise ConfigError("hue jitter must be <= 0.5")

    @classmethod
    def identity(cls):
        return cls(0, 0, 0, 0, 0, (1.0, 1.0), (0.0, 0.0), 0)


@dataclass
class TrainConfig:
    epochs: int = 93
    optimizer: str = "adamw"
    lr: float = 5e-4
    weight_decay: float = 0.01
    schedule: str = "cosine_warm_restarts"
    restart_period: int = 10
    restart_mult: int = 2
    min_lr: float = 1e-6
    batch_size: int = 32
    augmentation: AugmentationConfig = field(default_factory=AugmentationConfig)
    seed: int = 0
    class_weighting: bool = False
    attention_second_order: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        if isinstance(self.augmentation, dict):
            self.augmentation = AugmentationConfig(**self.augmentation)
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.optimizer != "adamw":
            raise ConfigError(f"unsupported optimizer {self.optimizer!r}")
        if self.schedule not in ("cosine_warm_restarts", "constant"):
            raise ConfigError(f"unsupported schedule {self.schedule!r}")

    def asdict(self):
        d = dataclasses.asdict(self)
        d["augmentation"]["scale"] = list(self.augmentation.scale)
        d["augmentation"]["translate"] = list(self.augmentation.translate)
        return d


# -- augmentation -------------------------------------------------------------------


def _affine_theta(angle_deg, scale, tx, ty):
    """Output->input sampling matrix for ``F.affine_grid`` (normalised coords)."""
    a = math.radians(angle_deg)
    c, s = math.cos(a), math.sin(a)
    inv = np.array([[c, s], [-s, c]]) / scale
    shift = np.array([2 * tx, 2 * ty])
    return torch.tensor(np.hstack([inv, (-inv @ shift)[:, None]]), dtype=torch.float32)


def sample_augmentation(config, rng):
    """Draw one set of augmentation parameters; disabled steps are left out."""
    p = {}
    if config.rotation > 0:
        p["angle"] = rng.uniform(-config.rotation, config.rotation)
    scale = 1.0
    if config.zoom > 0:
        scale *= rng.uniform(1 - config.zoom, 1 + config.zoom)
    if config.scale != (1.0, 1.0):
        scale *= rng.uniform(*config.scale)
    if scale != 1.0:
        p["scale"] = scale
    if any(config.translate):
        p["translate"] = (
            rng.uniform(-config.translate[0], config.translate[0]),
            rng.uniform(-config.translate[1], config.translate[1]),
        )
    for name in ("brightness", "contrast", "saturation"):
        mag = getattr(config, name)
        if mag > 0:
            p[name] = rng.uniform(max(0.0, 1 - mag), 1 + mag)
    if config.hue > 0:
        p["hue"] = rng.uniform(-config.hue, config.hue)
    return p


def apply_geometry(t, params):
    """Apply the sampled affine warp to a (C, H, W) float tensor; reflection padding."""
    if not {"angle", "scale", "translate"} & params.keys():
        return t
    tx, ty = params.get("translate", (0.0, 0.0))
    theta = _affine_theta(params.get("angle", 0.0), params.get("scale", 1.0), tx, ty)
    grid = F.affine_grid(theta[None], [1, *t.shape], align_corners=False)
    out = F.grid_sample(t[None].float(), grid, mode="bilinear", padding_mode="reflection", align_corners=False)
    return out[0]


def apply_photometric(img, params):
    if "brightness" in params:
        img = TF.adjust_brightness(img, params["brightness"])
    if "contrast" in params:
        img = TF.adjust_contrast(img, params["contrast"])
    if "saturation" in params:
        img = TF.adjust_saturation(img, params["saturation"])
    if "hue" in params:
        img = TF.adjust_hue(img, params["hue"])
    return img


def augment(image, config, rng, masks=None):
    """Randomly augment a (3, H, W) float image in [0, 1].

    Geometric steps are shared with ``masks`` (C, H, W) when given; then the
    pair ``(image, masks)`` is returned. Disabled steps are skipped entirely,
    so an all-zero config returns the input unchanged.
    """
    params = sample_augmentation(config, rng)
    out = apply_photometric(apply_geometry(image, params), params).clamp(0, 1)
    if masks is None:
        return out
    return out, apply_geometry(masks, params).clamp(0, 1)


def sample_rng(seed, epoch, image_id):
    return np.random.default_rng([seed, epoch, zlib.crc32(image_id.encode())])


# -- data preparation ---------------------------------------------------------------


@dataclass
class SplitTensors:
    ids: list
    images: torch.Tensor  # uint8 (N, 3, H, W) at model input size
    y: torch.Tensor  # (N, D)
    z: torch.Tensor  # (N, C)
    masks: list | None = None  # per image: (C, H, W) float32 fuzzy maps, zeros where absent
    has_mask: torch.Tensor | None = None  # (N, C) bool


def prepare_split(labels, ids, input_size, with_masks=False):
    size = tuple(input_size)
    images, ys, zs, masks, has = [], [], [], [], []
    C = len(labels.characteristics)
    for image_id in ids:
        item = labels.by_id(image_id)
        t = torch.as_tensor(np.ascontiguousarray(labels.image(image_id))).permute(2, 0, 1).float()
        if tuple(t.shape[1:]) != size:
            t = F.interpolate(t[None], size=size, mode="bilinear", align_corners=False, antialias=True)[0]
        images.append(t.round().clamp(0, 255).to(torch.uint8))
        ys.append(torch.from_numpy(item.diagnosis_onehot))
        zs.append(torch.from_numpy(item.presence.astype(np.float32)))
        if with_masks:
            stack = torch.zeros(C, *size)
            flags = torch.zeros(C, dtype=torch.bool)
            for ci, name in enumerate(labels.characteristics):
                fm = item.fuzzy_map(name)
                if fm is not None and item.presence[ci]:
                    stack[ci] = torch.from_numpy(np.clip(resize_map(fm.values, size), 0, 1)).float()
                    flags[ci] = True
            masks.append(stack)
            has.append(flags)
    return SplitTensors(
        ids=list(ids),
        images=torch.stack(images),
        y=torch.stack(ys),
        z=torch.stack(zs),
        masks=masks if with_masks else None,
        has_mask=torch.stack(has) if with_masks else None,
    )


def downscale_batch(masks, size):
    if tuple(masks.shape[-2:]) == tuple(size):
        return masks
    return F.interpolate(masks, size=tuple(size), mode="bilinear", align_corners=False, antialias=True).clamp(0, 1)


# -- losses for one batch ---------------------------------------------------------------


def compute_losses(model, x, y, z=None, masks=None, valid=None, create_graph=True, class_weights=None):
    """All loss terms for a batch plus their weighted sum under ``model.config``.

    ``masks`` are fuzzy maps already at feature-map resolution (N, C, h, w)
    and ``valid`` flags the (image, characteristic) pairs that carry one.
    """
    cfg = model.config
    features = model.backbone(x)
    char_logits, dx_logits = model.heads(features)
    losses = {"diagnosis": M.loss_diagnosis(torch.softmax(dx_logits, 1), y, class_weights)}
    if model.with_characteristics and cfg.lambda_c > 0 and z is not None:
        losses["characteristics"] = M.loss_characteristics(torch.sigmoid(char_logits), z)
    if model.with_characteristics and cfg.lambda_a > 0 and masks is not None:
        n, c = valid.shape
        attention = torch.zeros(n, c, *masks.shape[-2:], dtype=features.dtype)
        active = [ci for ci in range(c) if bool(valid[:, ci].any())]
        if active:
            cams = M.grad_cam_from_features(
                model, features, active, "characteristic", create_graph=create_graph, logits=char_logits
            )
            attention = attention.index_copy(1, torch.tensor(active), cams)
        losses["attention"] = M.loss_attention(attention, masks.to(features.dtype), valid)
    losses["total"] = M.combine(losses, cfg)
    return losses


# -- training loop -----------------------------------------------------------------------


@dataclass
class History:
    header: dict
    rows: list = field(default_factory=list)

    @property
    def columns(self):
        cols = ["epoch", "lr", "loss_d"]
        if self.header["kind"] != "dx":
            cols.append("loss_c")
        if self.header["kind"] == "dermx+":
            cols.append("loss_a")
        return cols + ["loss_total", "train_macro_f1", "val_macro_f1"]

    def column(self, name):
        return [row[name] for row in self.rows]

    def to_csv(self, path):
        lines = [f"# {key}: {canonical_json(value)}" for key, value in self.header.items()]
        buf = io.StringIO()
        buf.write("\n".join(lines) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.columns)
        for row in self.rows:
            writer.writerow([_fmt(row.get(c)) for c in self.columns])
        atomic_write_bytes(path, buf.getvalue().encode())


def _fmt(v):
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "NA"
    if isinstance(v, float):
        return f"{v:.6g}"
    return str(v)


@dataclass
class TrainResult:
    model: object
    history: History
    fold: int | None
    train_ids: list
    test_ids: list


def _batch(split, idx, augmentation, seed, epoch, feature_size, augment_on):
    imgs, masks = [], []
    for i in idx:
        img = split.images[i].float() / 255.0
        m = split.masks[i] if split.masks is not None else None
        if augment_on:
            rng = sample_rng(seed, epoch, split.ids[i])
            if m is None:
                img = augment(img, augmentation, rng)
            else:
                img, m = augment(img, augmentation, rng, m)
        imgs.append(M.normalize_input(img))
        if m is not None:
            masks.append(m)
    x = torch.stack(imgs)
    mask_t = valid = None
    if split.masks is not None:
        mask_t = downscale_batch(torch.stack(masks), feature_size)
        valid = split.has_mask[idx] & (split.z[idx] > 0)
    return x, split.y[idx], split.z[idx], mask_t, valid


@torch.no_grad()
def predict_split(model, split, batch_size=64):
    model.eval()
    dx, zs = [], []
    for start in range(0, len(split.ids), batch_size):
        x = torch.stack([M.normalize_input(im.float() / 255.0) for im in split.images[start:start + batch_size]])
        out = model(x)
        dx.append(out.diagnosis_probs)
        if out.characteristic_probs is not None:
            zs.append(out.characteristic_probs)
    return torch.cat(dx), (torch.cat(zs) if zs else None)


def split_macro_f1(model, split):
    if not split.ids:
        return math.nan, math.nan
    dx, zp = predict_split(model, split)
    D = dx.shape[1]
    dx_f1 = macro_f1(dx.argmax(1).numpy(), split.y.argmax(1).numpy(), range(D))
    char_f1 = math.nan
    if zp is not None:
        pred = (zp >= 0.5).numpy()
        target = split.z.numpy() > 0
        scores = [binary_prf(pred[:, c], target[:, c]).f1 for c in range(pred.shape[1])]
        char_f1 = aggregate(scores).mean
    return dx_f1, char_f1


def _class_weights(y):
    counts = y.sum(0)
    w = torch.where(counts > 0, counts.sum() / (len(counts) * counts.clamp(min=1)), torch.zeros_like(counts))
    return w


def train(
    kind,
    labels,
    fold_plan=None,
    fold=None,
    train_config=None,
    dermx_config=None,
    out_dir=None,
    train_ids=None,
    test_ids=None,
):
    """Train one model on one fold (or on ``train_ids`` directly).

    Returns a :class:`TrainResult`; when ``out_dir`` is given, the final
    checkpoint and ``history.csv`` are written there.
    """
    train_config = train_config or TrainConfig()
    if dermx_config is None:
        dermx_config = M.config_for_kind(kind, num_characteristics=len(labels.characteristics))
    if kind == "dx":
        dermx_config = dataclasses.replace(dermx_config, lambda_c=0.0, lambda_a=0.0)
    elif kind == "dermx":
        dermx_config = dataclasses.replace(dermx_config, lambda_a=0.0)
    elif kind == "dermx+" and dermx_config.lambda_a <= 0:
        raise ConfigError("dermx+ needs lambda_a > 0")
    if dermx_config.num_characteristics != len(labels.characteristics):
        raise ConfigError(
            f"num_characteristics={dermx_config.num_characteristics} but labels carry "
            f"{len(labels.characteristics)} characteristics"
        )

    if train_ids is None:
        if fold_plan is None or fold is None:
            train_ids, test_ids = sorted(it.image_id for it in labels.items), []
        else:
            train_ids, test_ids = fold_plan.train_ids(fold), fold_plan.test_ids(fold)
    test_ids = list(test_ids or [])

    torch.manual_seed(train_config.seed)
    model = M.build_model(dermx_config, kind)
    with_masks = kind == "dermx+"
    train_split = prepare_split(labels, train_ids, dermx_config.input_size, with_masks)
    test_split = prepare_split(labels, test_ids, dermx_config.input_size) if test_ids else None

    optimizer = torch.optim.AdamW(model.parameters(), lr=train_config.lr, weight_decay=train_config.weight_decay)
    scheduler = None
    if train_config.schedule == "cosine_warm_restarts":
        scheduler = torch.optim.lr_scheduler.CosineAnnealingWarmRestarts(
            optimizer, T_0=train_config.restart_period, T_mult=train_config.restart_mult, eta_min=train_config.min_lr
        )
    class_weights = _class_weights(train_split.y) if train_config.class_weighting else None

    history = History(
        header={
            "kind": kind,
            "fold": fold,
            "dermx_config": dermx_config.asdict(),
            "train_config": train_config.asdict(),
        }
    )
    aug = train_config.augmentation
    augment_on = aug != AugmentationConfig.identity()
    n = len(train_ids)
    for epoch in range(train_config.epochs):
        model.train()
        order = np.random.default_rng([train_config.seed, epoch]).permutation(n)
        sums = {}
        lr = optimizer.param_groups[0]["lr"]
        for start in range(0, n, train_config.batch_size):
            idx = torch.as_tensor(order[start:start + train_config.batch_size])
            x, y, z, masks, valid = _batch(
                train_split, idx, aug, train_config.seed, epoch, model.attention_size, augment_on
            )
            losses = compute_losses(
                model, x, y, z, masks, valid,
                create_graph=train_config.attention_second_order,
                class_weights=class_weights,
            )
            if not torch.isfinite(losses["total"]):
                bad = [train_split.ids[i] for i in idx.tolist()]
                if out_dir is not None:
                    atomic_write_bytes(
                        Path(out_dir) / "nan_batch.json",
                        canonical_json({"epoch": epoch, "image_ids": bad}).encode(),
                    )
                raise TrainingError(f"non-finite loss at epoch {epoch + 1}", batch_ids=bad)
            optimizer.zero_grad()
            losses["total"].backward()
            optimizer.step()
            for key, value in losses.items():
                sums[key] = sums.get(key, 0.0) + float(value.detach()) * len(idx)
        if scheduler is not None:
            scheduler.step()

        row = {"epoch": epoch + 1, "lr": lr, "loss_d": sums["diagnosis"] / n, "loss_total": sums["total"] / n}
        if "characteristics" in sums:
            row["loss_c"] = sums["characteristics"] / n
        if "attention" in sums:
            row["loss_a"] = sums["attention"] / n
        row["train_macro_f1"] = math.nan
        row["val_macro_f1"] = split_macro_f1(model, test_split)[0] if test_split is not None else math.nan
        history.rows.append(row)
        logger.info("epoch %d/%d %s", epoch + 1, train_config.epochs,
                    " ".join(f"{k}={v:.4f}" for k, v in row.items() if isinstance(v, float)))

        if out_dir is not None and train_config.checkpoint_every and (epoch + 1) % train_config.checkpoint_every == 0:
            _save(model, labels, Path(out_dir) / f"checkpoint_epoch{epoch + 1:03d}.pt", fold, train_ids, test_ids, train_config)

    history.rows[-1]["train_macro_f1"] = split_macro_f1(model, train_split)[0]
    model.eval()
    if out_dir is not None:
        out_dir = Path(out_dir)
        _save(model, labels, out_dir / "checkpoint.pt", fold, train_ids, test_ids, train_config)
        history.to_csv(out_dir / "history.csv")
    return TrainResult(model, history, fold, list(train_ids), test_ids)


def _save(model, labels, path, fold, train_ids, test_ids, train_config):
    M.save_checkpoint(
        path,
        model,
        diseases=labels.diseases,
        characteristics=labels.characteristics,
        extra={
            "fold": fold,
            "train_ids": list(train_ids),
            "test_ids": list(test_ids),
            "labels_hash": labels.content_hash,
            "train_config": train_config.asdict(),
        },
    )


# -- interpretable baselines ---------------------------------------------------------------


BASELINE_NAMES = ("logistic_regression", "decision_tree", "knn5", "categorical_nb")


def _baseline_models(seed):
    from sklearn.linear_model import LogisticRegression
    from sklearn.naive_bayes import CategoricalNB
    from sklearn.neighbors import KNeighborsClassifier
    from sklearn.tree import DecisionTreeClassifier

    return {
        "logistic_regression": LogisticRegression(max_iter=2000),
        "decision_tree": DecisionTreeClassifier(random_state=seed),
        "knn5": KNeighborsClassifier(n_neighbors=5),
        "categorical_nb": CategoricalNB(min_categories=2),
    }


@dataclass
class BaselineResult:
    scores: dict  # model name -> list of per-fold macro F1 (nan where fitting failed)
    models: dict  # model name -> list of fitted estimators (None where failed)
    flags: list  # human-readable notes about degenerate folds

    def summary(self):
        return {name: aggregate(vals) for name, vals in self.scores.items()}


def train_interpretable_baselines(labels, fold_plan, seed=0):
    """Fit four classical classifiers on binary characteristic vectors per fold."""
    X = {it.image_id: it.presence.astype(int) for it in labels.items}
    yv = {it.image_id: it.gold_diagnosis for it in labels.items}
    all_classes = sorted(set(yv.values()))
    scores = {name: [] for name in BASELINE_NAMES}
    fitted = {name: [] for name in BASELINE_NAMES}
    flags = []
    for fold in range(fold_plan.k):
        tr, te = fold_plan.train_ids(fold), fold_plan.test_ids(fold)
        if not tr or not te:
            flags.append(f"fold {fold}: empty train or test split")
            for name in BASELINE_NAMES:
                scores[name].append(math.nan)
                fitted[name].append(None)
            continue
        Xtr = np.stack([X[i] for i in tr])
        ytr = np.array([yv[i] for i in tr])
        Xte = np.stack([X[i] for i in te])
        yte = np.array([yv[i] for i in te])
        missing = sorted(set(all_classes) - set(ytr))
        if missing:
            flags.append(f"fold {fold}: classes absent from training data: {missing}")
        for name, est in _baseline_models(seed).items():
            try:
                est.fit(Xtr, ytr)
                pred = est.predict(Xte)
            except ValueError as exc:
                flags.append(f"fold {fold}: {name} failed: {exc}")
                scores[name].append(math.nan)
                fitted[name].append(None)
                continue
            scores[name].append(macro_f1(pred, yte, sorted(set(yte) | set(pred))))
            fitted[name].append(est)
    return BaselineResult(scores, fitted, flags)
