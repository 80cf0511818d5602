"""Training loop, evaluation metrics, sweeps and the gender-routed age
hierarchy."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import encoding as enc
from . import nn
from .data import Dataset, augment_dataset, compute_standardization_stats, resize_bilinear
from .models import (Checkpoint, ModelSpec, Preprocess, backbone_mask, build_backbone,
                     init_random, replace_top, set_freeze)
from .nn import ConfigError, ShapeError

log = logging.getLogger(__name__)

DECODERS = ("argmax", "expected_value")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 50
    epochs: int = 60
    serial_splits: int = 1
    val_sample_size: int = 500
    loss: str = "auto"  # auto: bce for gender, mae for age
    seed: int = 0
    augment: bool = False
    crop: tuple | None = None  # (width, height) of augmentation crops
    input_mode: str = "standardize"
    encoding: str = "ldae"  # ldae | onehot
    schedule: enc.AlphaSchedule = field(default_factory=enc.AlphaSchedule)
    rho: float = 0.95
    epsilon: float = 1e-6
    decoder: str = "expected_value"

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.serial_splits < 1:
            raise ConfigError("batch_size, epochs and serial_splits must all be >= 1")
        if self.val_sample_size < 1:
            raise ConfigError("val_sample_size must be >= 1")
        if self.decoder not in DECODERS:
            raise ConfigError(f"unknown decoder {self.decoder!r}")
        if self.encoding not in ("ldae", "onehot"):
            raise ConfigError(f"unknown encoding {self.encoding!r}")
        if isinstance(self.schedule, (str, int, float)):
            self.schedule = enc.AlphaSchedule.parse(str(self.schedule))

    def loss_kind(self, head):
        if self.loss == "auto":
            return nn.BCE if head == "gender" else nn.MAE
        if self.loss not in nn.LOSS_KINDS:
            raise ConfigError(f"unknown loss {self.loss!r}")
        return self.loss


@dataclass
class EpochRecord:
    epoch: int
    chunk: int
    train_loss: float
    val_loss: float
    val_metric: float
    seconds: float


@dataclass
class TrainLog:
    entries: list = field(default_factory=list)
    best_epoch: int | None = None
    metric_name: str = ""

    CSV_COLUMNS = ("epoch", "train_loss", "val_loss", "val_metric", "seconds")

    def rows(self, with_time=True):
        for e in self.entries:
            row = [e.epoch, repr(e.train_loss), repr(e.val_loss), repr(e.val_metric)]
            yield row + [f"{e.seconds:.3f}"] if with_time else row

    def fingerprint(self):
        """Everything except wall-clock time; equal across same-seed reruns."""
        return [tuple(r) for r in self.rows(with_time=False)] + [("best", self.best_epoch)]

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(self.CSV_COLUMNS)
            writer.writerows(self.rows())

    @property
    def val_losses(self):
        return [e.val_loss for e in self.entries]


@dataclass
class TrainResult:
    best: Checkpoint
    final: Checkpoint
    log: TrainLog
    model: ModelSpec


def age_loss(pred, target, kind="mae"):
    """Loss between an 81-way predicted distribution and its encoded target."""
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape[-1] != enc.N_AGES or target.shape[-1] != enc.N_AGES:
        raise ShapeError(f"age distributions need {enc.N_AGES} entries, got "
                         f"{pred.shape[-1]} and {target.shape[-1]}")
    kinds = {"mae": nn.MAE, "ce": nn.CATEGORICAL_CE}
    if kind not in kinds:
        raise ConfigError(f"unknown age loss {kind!r}")
    return nn.loss(pred, target, kinds[kind])


def make_targets(ds: Dataset, head, config: TrainConfig):
    if head == "gender":
        return np.eye(2, dtype=np.float32)[ds.genders]
    return enc.encode_batch(ds.ages, config.encoding, config.schedule)


def model_inputs(model: ModelSpec, images):
    """Resize raw pixels to the model's input size and apply its preprocessing."""
    images = np.asarray(images, dtype=np.float32)
    c, h, w = model.input_shape
    if images.shape[1:] != (c, h, w):
        if images.shape[1] != c:
            raise ShapeError(f"model expects {c} channels, images have {images.shape[1]}")
        images = np.stack([resize_bilinear(im, h, w) for im in images])
    return model.preprocess.apply(images)


def predict(model: ModelSpec, images, batch_size=250):
    return model.predict(model_inputs(model, images), batch_size)


def _metric(head, outputs, ds: Dataset, decoder):
    if head == "gender":
        return float((outputs.argmax(axis=1) == ds.genders).mean())
    return float(np.abs(enc.decode_batch(outputs, decoder) - ds.ages).mean())


def _eval_loss(model, x, targets, kind, batch_size=250):
    total = 0.0
    for i in range(0, len(x), batch_size):
        out = model.forward(x[i:i + batch_size])
        total += nn.loss(out, targets[i:i + batch_size], kind) * len(out)
    model.clear_cache()
    return total / len(x), None


def train(spec: ModelSpec, train_set: Dataset, val_source: Dataset, config: TrainConfig,
          progress=None) -> TrainResult:
    """Train a copy of ``spec``; ``spec`` itself is not modified.

    A fixed validation sample is drawn once from ``val_source``. The training
    set is cut into ``serial_splits`` consecutive chunks trained one after
    another for ``config.epochs`` epochs each, reshuffling within the chunk
    every epoch. The checkpoint with the lowest validation loss so far is kept
    as ``best``.
    """
    head = spec.head
    if head is None:
        raise ConfigError("model has no output head; call replace_top first")
    if len(train_set) == 0:
        raise ConfigError("training set is empty")
    overlap = set(train_set.paths) & set(val_source.paths)
    if overlap:
        raise ConfigError(f"{len(overlap)} image(s) appear in both training and validation "
                          f"data, e.g. {sorted(overlap)[0]!r}")
    if config.val_sample_size > len(val_source):
        raise ConfigError(f"val_sample_size {config.val_sample_size} exceeds the "
                          f"{len(val_source)} available validation images")
    kind = config.loss_kind(head)

    model = spec.copy()
    stats = compute_standardization_stats(train_set.images)
    model.preprocess = Preprocess(config.input_mode, stats.mean,
                                  stats.std if config.input_mode == "standardize" else 1.0)
    rng_val = np.random.default_rng([config.seed, 1])
    val = val_source.take(np.sort(rng_val.choice(len(val_source), config.val_sample_size,
                                                 replace=False)))
    val_x = model_inputs(model, val.images)
    val_t = make_targets(val, head, config)

    rng_shuffle = np.random.default_rng([config.seed, 2])
    rng_drop = np.random.default_rng([config.seed, 3])
    opt = nn.Adadelta(config.rho, config.epsilon)
    tlog = TrainLog(metric_name="accuracy" if head == "gender" else f"mae_{config.decoder}")
    best, best_loss = None, math.inf
    provenance = {"seed": config.seed, "head": head, "loss": kind,
                  "train_size": len(train_set), "val_size": len(val)}

    epoch = 0
    for chunk_no, idx in enumerate(np.array_split(np.arange(len(train_set)), config.serial_splits)):
        chunk = train_set.take(idx)
        if config.augment:
            cw, ch = config.crop or (model.input_shape[2], model.input_shape[1])
            chunk = augment_dataset(chunk, cw, ch)
        x = model_inputs(model, chunk.images)
        t = make_targets(chunk, head, config)
        for _ in range(config.epochs):
            epoch += 1
            start = time.perf_counter()
            order = rng_shuffle.permutation(len(x))
            total = 0.0
            for b, s in enumerate(range(0, len(x), config.batch_size)):
                bi = order[s:s + config.batch_size]
                out = model.forward(x[bi], training=True, rng=rng_drop)
                value, grad = nn.loss_and_grad(out, t[bi], kind)
                if not math.isfinite(value):
                    raise TrainingDivergedError(f"non-finite loss {value} at epoch {epoch}, "
                                                f"batch {b + 1}")
                model.backward(grad)
                opt.step(model)
                total += value * len(bi)
            train_loss = total / len(x)
            val_loss, _ = _eval_loss(model, val_x, val_t, kind)
            metric = _metric(head, model.predict(val_x), val, config.decoder)
            rec = EpochRecord(epoch, chunk_no + 1, train_loss, val_loss, metric,
                              time.perf_counter() - start)
            tlog.entries.append(rec)
            if val_loss < best_loss:
                best_loss = val_loss
                tlog.best_epoch = epoch
                best = Checkpoint.from_model(model, **provenance, epoch=epoch, val_loss=val_loss)
            log.info("epoch %d chunk %d train %.5f val %.5f %s %.4f", epoch, chunk_no + 1,
                     train_loss, val_loss, tlog.metric_name, metric)
            if progress:
                progress(rec)
    final = Checkpoint.from_model(model, **provenance, epoch=epoch,
                                  val_loss=tlog.entries[-1].val_loss)
    if best is None:  # every validation loss was NaN
        raise TrainingDivergedError("validation loss never finite; no best checkpoint")
    return TrainResult(best, final, tlog, model)


# -- evaluation --------------------------------------------------------------

def evaluate_gender(model: ModelSpec, test_set: Dataset) -> float:
    if len(test_set) == 0:
        raise ConfigError("test set is empty")
    return _metric("gender", predict(model, test_set.images), test_set, None)


def evaluate_age(model: ModelSpec, test_set: Dataset, decoder="expected_value") -> float:
    if len(test_set) == 0:
        raise ConfigError("test set is empty")
    if decoder not in DECODERS:
        raise ConfigError(f"unknown decoder {decoder!r}")
    return _metric("age", predict(model, test_set.images), test_set, decoder)


def evaluate(model: ModelSpec, test_set: Dataset) -> dict:
    """Metrics summary; age models report both decoders side by side."""
    out = predict(model, test_set.images)
    if model.head == "gender":
        return {"n": len(test_set), "accuracy": _metric("gender", out, test_set, None)}
    return {"n": len(test_set),
            "mae_argmax": _metric("age", out, test_set, "argmax"),
            "mae_expected_value": _metric("age", out, test_set, "expected_value")}


# -- model building and sweeps -----------------------------------------------

@dataclass
class ArchConfig:
    input_size: tuple = (64, 64)  # width, height
    channels: int = 1
    stacks: list = field(default_factory=lambda: [(8, 1), (16, 1)])
    dense_sizes: list = field(default_factory=lambda: [512, 512])
    dropout: float = 0.5

    @property
    def input_shape(self):
        w, h = self.input_size
        return (self.channels, h, w)


def build_model(arch: ArchConfig, head, seed=0, backbone: ModelSpec | None = None,
                freeze_backbone=False) -> ModelSpec:
    """Backbone + fresh top. With ``backbone`` (e.g. a loaded checkpoint) its
    weights are kept and only the new top is initialised."""
    if backbone is None:
        backbone = build_backbone(arch.stacks, arch.input_shape)
        model = init_random(replace_top(backbone, arch.dense_sizes, arch.dropout, head), seed)
    else:
        model = init_random(replace_top(backbone, arch.dense_sizes, arch.dropout, head), seed,
                            only_pending=True)
    set_freeze(model, backbone_mask(model) if freeze_backbone else [False] * len(model.weight_layers()))
    return model


SWEEP_AXES = ("epochs", "dropout", "dense_sizes", "alpha_schedule", "encoding")


@dataclass
class SweepRow:
    value: str
    best_metric: float | None = None
    final_metric: float | None = None
    best_argmax: float | None = None
    final_argmax: float | None = None
    error: str = ""


def _apply_axis(axis, value, arch: ArchConfig, config: TrainConfig):
    if axis == "epochs":
        return arch, replace(config, epochs=int(value))
    if axis == "dropout":
        return replace(arch, dropout=float(value)), config
    if axis == "dense_sizes":
        sizes = [int(v) for v in (value.split("x") if isinstance(value, str) else value)]
        return replace(arch, dense_sizes=sizes), config
    if axis == "alpha_schedule":
        return arch, replace(config, encoding="ldae", schedule=enc.AlphaSchedule.parse(str(value)))
    if axis == "encoding":
        if str(value) == "onehot":
            return arch, replace(config, encoding="onehot")
        return arch, replace(config, encoding="ldae", schedule=enc.AlphaSchedule.parse(str(value)))
    raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")


def sweep(axis, values, arch: ArchConfig, config: TrainConfig, head, train_set, val_source,
          test_set, backbone=None, freeze_backbone=False):
    """One train + test run per value, all with the same seed.

    A failing value becomes a row with ``error`` set; the sweep carries on.
    """
    if not values:
        raise ConfigError("sweep needs at least one value")
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {SWEEP_AXES}")
    rows = []
    for value in values:
        label = "x".join(map(str, value)) if isinstance(value, (list, tuple)) else str(value)
        row = SweepRow(label)
        try:
            a, c = _apply_axis(axis, value, arch, config)
            model = build_model(a, head, c.seed, backbone, freeze_backbone)
            result = train(model, train_set, val_source, c)
            best_m = result.best.to_model()
            final_m = result.final.to_model()
            if head == "gender":
                row.best_metric = evaluate_gender(best_m, test_set)
                row.final_metric = evaluate_gender(final_m, test_set)
            else:
                row.best_metric = evaluate_age(best_m, test_set, "expected_value")
                row.final_metric = evaluate_age(final_m, test_set, "expected_value")
                row.best_argmax = evaluate_age(best_m, test_set, "argmax")
                row.final_argmax = evaluate_age(final_m, test_set, "argmax")
        except Exception as exc:  # recorded per row, sweep continues
            log.warning("sweep value %s failed: %s", label, exc)
            row.error = f"{type(exc).__name__}: {exc}"
        rows.append(row)
    return rows


SWEEP_COLUMNS = ("value", "best_metric", "final_metric", "best_argmax", "final_argmax", "error")


def write_sweep_csv(rows, path):
    def fmt(v):
        return "" if v is None else (repr(v) if isinstance(v, float) else str(v))

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SWEEP_COLUMNS)
        for r in rows:
            writer.writerow([fmt(getattr(r, c)) for c in SWEEP_COLUMNS])


def write_sweep_table(rows, path, head):
    """Transposed layout: one column per swept value, one row per model kind."""
    if head == "gender":
        lines = [("Best", "best_metric"), ("Final", "final_metric")]
    else:
        lines = [("Best ArgMax", "best_argmax"), ("Best Expected Value", "best_metric"),
                 ("Final ArgMax", "final_argmax"), ("Final Expected Value", "final_metric")]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([""] + [r.value for r in rows])
        for name, attr in lines:
            writer.writerow([name] + ["" if getattr(r, attr) is None else f"{getattr(r, attr):.3f}"
                                      for r in rows])


# -- hierarchy ---------------------------------------------------------------

@dataclass
class HierarchyModel:
    gender_model: ModelSpec
    male_age_model: ModelSpec
    female_age_model: ModelSpec

    def __post_init__(self):
        if self.gender_model.head != "gender":
            raise ConfigError("hierarchy gender model must have a 2-way gender head")
        for m in (self.male_age_model, self.female_age_model):
            if m.head != "age":
                raise ConfigError("hierarchy age models must have 81-way age heads")


def predict_hierarchical(h: HierarchyModel, images, decoder="expected_value"):
    """Route each image by the gender model's argmax. Returns
    ``(genders, ages)`` with genders as 0 (male) / 1 (female)."""
    images = np.asarray(images, dtype=np.float32)
    genders = predict(h.gender_model, images).argmax(axis=1)
    # Both age models see the full batch: BLAS results depend on batch
    # composition, so predicting on routed subsets would not be bit-identical
    # to a single model run over the same images.
    ages = np.zeros(len(images))
    for g, model in ((0, h.male_age_model), (1, h.female_age_model)):
        sel = genders == g
        if sel.any():
            ages[sel] = enc.decode_batch(predict(model, images), decoder)[sel]
    return genders, ages


def predict_age_hierarchical(h: HierarchyModel, sample, decoder="expected_value"):
    """Single image -> ``("M" | "F", age)``."""
    pixels = np.asarray(getattr(sample, "pixels", sample), dtype=np.float32)
    genders, ages = predict_hierarchical(h, pixels[None], decoder)
    return ("M" if genders[0] == 0 else "F"), float(ages[0])


# published hierarchy vs single-model MAE, kept for context only
REFERENCE_MAE = {"hierarchy": 4.82, "single": 4.69}


def hierarchy_report(h: HierarchyModel, single: ModelSpec | None, test_set: Dataset,
                     decoder="expected_value") -> dict:
    genders, ages = predict_hierarchical(h, test_set.images, decoder)
    report = {
        "n": len(test_set),
        "decoder": decoder,
        "routing_accuracy": float((genders == test_set.genders).mean()),
        "hierarchy_mae": float(np.abs(ages - test_set.ages).mean()),
    }
    for g, name in ((0, "male"), (1, "female")):
        sel = test_set.genders == g
        report[f"hierarchy_mae_{name}"] = (float(np.abs(ages[sel] - test_set.ages[sel]).mean())
                                           if sel.any() else float("nan"))
    if single is not None:
        report["single_mae"] = evaluate_age(single, test_set, decoder)
        report["hierarchy_minus_single"] = report["hierarchy_mae"] - report["single_mae"]
    report["reference_hierarchy_mae"] = REFERENCE_MAE["hierarchy"]
    report["reference_single_mae"] = REFERENCE_MAE["single"]
    return report


def write_metrics(metrics: dict, path):
    """``key: value`` lines, floats at full precision."""
    with open(path, "w") as fh:
        for k, v in metrics.items():
            fh.write(f"{k}: {v!r}\n" if isinstance(v, float) else f"{k}: {v}\n")
