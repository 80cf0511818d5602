"""Label manifests, cleaning, S1/S2/S3 subsetting, image I/O and
pixel-level preprocessing (standardisation, 12-crop augmentation)."""

from __future__ import annotations

import csv
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

MANIFEST_COLUMNS = ("subject_id", "image_path", "age", "gender", "race")
GENDERS = ("M", "F")
RACES = ("B", "W", "O")
CLEANABLE_FIELDS = ("gender", "race", "dob")
DEFAULT_AGE_RANGE = (16, 77)

# full-size reference roster and set sizes
FULL_ROSTER_SIZE = 55_134
FULL_SET_SIZE = 10_280


class ManifestFormatError(ValueError):
    pass


class SizingError(ValueError):
    pass


class ImageFormatError(ValueError):
    pass


class DegenerateDataError(ValueError):
    pass


@dataclass(frozen=True)
class LabelRecord:
    subject_id: str
    image_path: str
    age: int
    gender: str  # "M" or "F"
    race: str  # "B", "W" or "O"
    dob: str = ""

    @property
    def is_male(self):
        return self.gender == "M"


@dataclass
class Reject:
    line: int
    reason: str
    row: dict


def load_labels(path, age_range=DEFAULT_AGE_RANGE):
    """Read a label manifest. Returns ``(records, rejects)``.

    Bad rows never abort the load; each lands in ``rejects`` with its line
    number. A missing required column does.
    """
    records, rejects, seen = [], [], set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in MANIFEST_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestFormatError(f"{path}: missing required column(s) {', '.join(missing)}")
        for row in reader:
            line = reader.line_num
            try:
                rec = _parse_row(row, age_range)
            except ValueError as exc:
                rejects.append(Reject(line, str(exc), row))
                continue
            if rec.image_path in seen:
                rejects.append(Reject(line, f"duplicate image_path {rec.image_path!r}", row))
                continue
            seen.add(rec.image_path)
            records.append(rec)
    return records, rejects


def _parse_row(row, age_range):
    sid = (row.get("subject_id") or "").strip()
    img = (row.get("image_path") or "").strip()
    if not sid:
        raise ValueError("empty subject_id")
    if not img:
        raise ValueError("empty image_path")
    try:
        age = int((row.get("age") or "").strip())
    except ValueError:
        raise ValueError(f"age {row.get('age')!r} is not an integer") from None
    lo, hi = age_range
    if not lo <= age <= hi:
        raise ValueError(f"age {age} outside valid range {lo}..{hi}")
    gender = (row.get("gender") or "").strip().upper()
    if gender not in GENDERS:
        raise ValueError(f"gender {row.get('gender')!r} not in {{M,F}}")
    race = (row.get("race") or "").strip().upper()
    if race not in RACES:
        raise ValueError(f"race {row.get('race')!r} not in {{B,W,O}}")
    return LabelRecord(sid, img, age, gender, race, (row.get("dob") or "").strip())


def write_labels(records, path):
    with_dob = any(r.dob for r in records)
    cols = list(MANIFEST_COLUMNS) + (["dob"] if with_dob else [])
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(cols)
        for r in records:
            row = [r.subject_id, r.image_path, r.age, r.gender, r.race]
            writer.writerow(row + ([r.dob] if with_dob else []))


# -- cleaning ----------------------------------------------------------------

@dataclass
class InconsistencyReport:
    """subject_id -> field -> distinct values, only for conflicting fields."""

    conflicts: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.conflicts)

    def __bool__(self):
        return bool(self.conflicts)

    def rows(self):
        for sid in sorted(self.conflicts):
            for fld, values in sorted(self.conflicts[sid].items()):
                yield sid, fld, "|".join(sorted(values))

    def write_csv(self, path):
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["subject_id", "field", "values"])
            writer.writerows(self.rows())


def detect_inconsistencies(records) -> InconsistencyReport:
    by_subject = defaultdict(lambda: defaultdict(set))
    for r in records:
        for fld in CLEANABLE_FIELDS:
            value = getattr(r, fld)
            if value:
                by_subject[r.subject_id][fld].add(value)
    conflicts = {}
    for sid, fields in by_subject.items():
        bad = {f: set(v) for f, v in fields.items() if len(v) >= 2}
        if bad:
            conflicts[sid] = bad
    return InconsistencyReport(conflicts)


def load_overrides(path):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in ("subject_id", "field", "value") if c not in (reader.fieldnames or [])]
        if missing:
            raise ManifestFormatError(f"{path}: missing override column(s) {', '.join(missing)}")
        return [(r["subject_id"].strip(), r["field"].strip(), r["value"].strip().upper()
                 if r["field"].strip() in ("gender", "race") else r["value"].strip())
                for r in reader]


@dataclass
class CleanResult:
    records: list
    quarantined: list
    warnings: list


def clean_labels(records, report: InconsistencyReport | None = None, overrides=()):
    """Resolve conflicting per-subject labels.

    Per field: an override wins, else the strict majority value across the
    subject's records, else (a tie) every record of that subject goes to
    quarantine.
    """
    report = report if report is not None else detect_inconsistencies(records)
    subjects = {r.subject_id for r in records}
    fixes = defaultdict(dict)
    warnings = []
    for sid, fld, value in overrides:
        if fld not in CLEANABLE_FIELDS:
            warnings.append(f"override for {sid}: unknown field {fld!r}")
        elif sid not in subjects:
            warnings.append(f"override for unknown subject {sid!r} ignored")
        else:
            fixes[sid][fld] = value
    by_subject = defaultdict(list)
    for r in records:
        by_subject[r.subject_id].append(r)
    bad_subjects = set()
    for sid, fields in report.conflicts.items():
        for fld in fields:
            if fld in fixes[sid]:
                continue
            counts = Counter(getattr(r, fld) for r in by_subject[sid]).most_common()
            if len(counts) > 1 and counts[0][1] == counts[1][1]:
                bad_subjects.add(sid)
            else:
                fixes[sid][fld] = counts[0][0]
    cleaned, quarantined = [], []
    for r in records:
        if r.subject_id in bad_subjects:
            quarantined.append(r)
        elif fixes.get(r.subject_id):
            cleaned.append(replace(r, **fixes[r.subject_id]))
        else:
            cleaned.append(r)
    return CleanResult(cleaned, quarantined, warnings)


# -- subsetting --------------------------------------------------------------

@dataclass
class SplitSet:
    s1: list
    s2: list
    s3: list

    def sizes(self):
        return len(self.s1), len(self.s2), len(self.s3)


def default_set_size(n_records):
    return int(round(FULL_SET_SIZE * n_records / FULL_ROSTER_SIZE))


def guo_mu_subset(records, seed=0, size=None, strict_subjects=False) -> SplitSet:
    """Split a roster into S1, S2 (black/white only, 3:1 male:female) and S3.

    ``size`` defaults to the full-roster set size scaled to the roster, i.e.
    10,280 on a 55,134-image roster. Selection is uniform without
    replacement; S3 holds everything else, in roster order.
    """
    records = list(records)
    size = default_set_size(len(records)) if size is None else int(size)
    n_f = int(round(size / 4))
    n_m = size - n_f
    rng = np.random.default_rng(seed)
    if strict_subjects:
        return _subset_by_subject(records, n_m, n_f, rng)
    eligible = [i for i, r in enumerate(records) if r.race in ("B", "W")]
    males = [i for i in eligible if records[i].gender == "M"]
    females = [i for i in eligible if records[i].gender == "F"]
    short = []
    if len(males) < 2 * n_m:
        short.append(f"{2 * n_m - len(males)} black/white male records")
    if len(females) < 2 * n_f:
        short.append(f"{2 * n_f - len(females)} black/white female records")
    if short:
        raise SizingError(f"two sets of {size} need {2 * n_m} males and {2 * n_f} females; "
                          f"short by {' and '.join(short)}")
    males = rng.permutation(males)
    females = rng.permutation(females)
    s1 = sorted(list(males[:n_m]) + list(females[:n_f]))
    s2 = sorted(list(males[n_m:2 * n_m]) + list(females[n_f:2 * n_f]))
    used = set(s1) | set(s2)
    return SplitSet([records[i] for i in s1], [records[i] for i in s2],
                    [r for i, r in enumerate(records) if i not in used])


def _subset_by_subject(records, n_m, n_f, rng):
    groups = defaultdict(list)
    for i, r in enumerate(records):
        groups[r.subject_id].append(i)
    subjects = sorted(groups)
    eligible = [s for s in subjects
                if all(records[i].race in ("B", "W") for i in groups[s])
                and len({records[i].gender for i in groups[s]}) == 1]
    order = [eligible[i] for i in rng.permutation(len(eligible))]
    taken = set()
    sets = []
    for _ in range(2):
        need = {"M": n_m, "F": n_f}
        chosen = []
        for sid in order:
            if sid in taken:
                continue
            g = records[groups[sid][0]].gender
            if len(groups[sid]) <= need[g]:
                need[g] -= len(groups[sid])
                chosen.append(sid)
                taken.add(sid)
            if need["M"] == need["F"] == 0:
                break
        if need["M"] or need["F"]:
            raise SizingError(f"subject-disjoint split short by {need['M']} male and "
                              f"{need['F']} female records")
        sets.append(sorted(i for sid in chosen for i in groups[sid]))
    used = set(sets[0]) | set(sets[1])
    return SplitSet([records[i] for i in sets[0]], [records[i] for i in sets[1]],
                    [r for i, r in enumerate(records) if i not in used])


# -- images ------------------------------------------------------------------

def _read_token(data, pos):
    n = len(data)
    while pos < n:
        c = data[pos:pos + 1]
        if c == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
        pos += 1
    return data[start:pos], pos


def read_netpbm(path) -> np.ndarray:
    """Decode a binary PGM (P5) or PPM (P6) into a uint8 ``(C, H, W)`` array."""
    data = Path(path).read_bytes()
    magic, pos = _read_token(data, 0)
    if magic == b"P5":
        channels = 1
    elif magic == b"P6":
        channels = 3
    else:
        raise ImageFormatError(f"{path}: unsupported magic number {magic!r} (need P5 or P6)")
    try:
        w_tok, pos = _read_token(data, pos)
        h_tok, pos = _read_token(data, pos)
        m_tok, pos = _read_token(data, pos)
        width, height, maxval = int(w_tok), int(h_tok), int(m_tok)
    except ValueError:
        raise ImageFormatError(f"{path}: malformed header") from None
    if maxval != 255:
        raise ImageFormatError(f"{path}: maxval {maxval} unsupported (need 255)")
    pos += 1  # single whitespace byte after maxval
    need = width * height * channels
    raster = data[pos:pos + need]
    if len(raster) != need:
        raise ImageFormatError(f"{path}: raster has {len(raster)} bytes, expected {need}")
    img = np.frombuffer(raster, dtype=np.uint8).reshape(height, width, channels)
    return np.ascontiguousarray(img.transpose(2, 0, 1))


def write_netpbm(path, pixels):
    """Write a ``(C, H, W)`` or ``(H, W)`` uint8 array as P5/P6."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[None]
    c, h, w = arr.shape
    if c not in (1, 3):
        raise ImageFormatError(f"cannot write {c}-channel image as PGM/PPM")
    arr = np.clip(np.rint(arr), 0, 255).astype(np.uint8)
    header = f"{'P5' if c == 1 else 'P6'}\n{w} {h}\n255\n".encode()
    Path(path).write_bytes(header + arr.transpose(1, 2, 0).tobytes())


def resize_bilinear(img, out_h, out_w) -> np.ndarray:
    """Corner-aligned bilinear resize of a ``(C, H, W)`` array to float32."""
    x = np.asarray(img, dtype=np.float64)
    _, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return x.astype(np.float32)

    def axis(n_in, n_out):
        pos = np.zeros(n_out) if n_out == 1 else np.arange(n_out) * (n_in - 1) / (n_out - 1)
        i0 = np.clip(np.floor(pos).astype(int), 0, n_in - 1)
        i1 = np.minimum(i0 + 1, n_in - 1)
        return i0, i1, pos - i0

    y0, y1, fy = axis(h, out_h)
    x0, x1, fx = axis(w, out_w)
    top = x[:, y0][:, :, x0] * (1 - fx) + x[:, y0][:, :, x1] * fx
    bot = x[:, y1][:, :, x0] * (1 - fx) + x[:, y1][:, :, x1] * fx
    out = top * (1 - fy)[:, None] + bot * fy[:, None]
    return out.astype(np.float32)


@dataclass
class ImageSample:
    pixels: np.ndarray  # float32 (C, H, W), values in [0, 255]
    label: LabelRecord | None = None


def load_image(path, size=None, label=None) -> ImageSample:
    """Load a PGM/PPM; ``size=(width, height)`` resizes when it differs."""
    pixels = read_netpbm(path).astype(np.float32)
    if size is not None:
        w, h = size
        pixels = resize_bilinear(pixels, h, w)
    return ImageSample(pixels, label)


def resolve_path(record: LabelRecord, root) -> Path:
    p = Path(record.image_path)
    return p if p.is_absolute() or root is None else Path(root) / p


@dataclass
class Dataset:
    """Images ``(N, C, H, W)`` float32 aligned with their label records."""

    images: np.ndarray
    records: list

    def __len__(self):
        return len(self.records)

    def __post_init__(self):
        if len(self.images) != len(self.records):
            raise ValueError(f"{len(self.images)} images vs {len(self.records)} records")

    @property
    def ages(self):
        return np.array([r.age for r in self.records])

    @property
    def genders(self):
        """0 for male, 1 for female."""
        return np.array([0 if r.gender == "M" else 1 for r in self.records])

    @property
    def paths(self):
        return [r.image_path for r in self.records]

    def take(self, idx):
        idx = np.asarray(idx, dtype=int)
        return Dataset(self.images[idx], [self.records[i] for i in idx])

    def where(self, mask):
        return self.take(np.flatnonzero(mask))


def load_dataset(records, root=None, size=None) -> Dataset:
    """Load every record's image, in manifest order."""
    images = [load_image(resolve_path(r, root), size).pixels for r in records]
    if not images:
        return Dataset(np.zeros((0, 1, 1, 1), np.float32), [])
    shapes = {im.shape for im in images}
    if len(shapes) > 1:
        raise ImageFormatError(f"images have mixed shapes {sorted(shapes)}; set a working size")
    return Dataset(np.stack(images), list(records))


def load_manifest_dataset(path, size=None, age_range=DEFAULT_AGE_RANGE) -> Dataset:
    records, rejects = load_labels(path, age_range)
    if rejects:
        first = rejects[0]
        raise ManifestFormatError(f"{path}: {len(rejects)} rejected row(s); first at line "
                                  f"{first.line}: {first.reason}")
    return load_dataset(records, Path(path).parent, size)


# -- normalisation -----------------------------------------------------------

@dataclass(frozen=True)
class StandardizationStats:
    mean: float
    std: float


def compute_standardization_stats(samples) -> StandardizationStats:
    """Population mean/std over every channel value, merged batch-wise in
    float64 (Chan et al. pairwise update)."""
    if isinstance(samples, np.ndarray):
        samples = [samples]
    n, mean, m2 = 0, 0.0, 0.0
    for s in samples:
        x = np.asarray(getattr(s, "pixels", s), dtype=np.float64).ravel()
        if x.size == 0:
            continue
        bm = x.mean()
        bm2 = ((x - bm) ** 2).sum()
        tot = n + x.size
        delta = bm - mean
        mean += delta * x.size / tot
        m2 += bm2 + delta * delta * n * x.size / tot
        n = tot
    if n == 0:
        raise DegenerateDataError("no pixels to compute statistics from")
    std = math.sqrt(m2 / n)
    if std == 0:
        raise DegenerateDataError("all pixels are equal; standard deviation is zero")
    return StandardizationStats(float(mean), float(std))


def standardize(pixels, stats: StandardizationStats):
    x = np.asarray(getattr(pixels, "pixels", pixels), dtype=np.float64)
    return ((x - stats.mean) / stats.std).astype(np.float32)


def unstandardize(pixels, stats: StandardizationStats):
    x = np.asarray(pixels, dtype=np.float64)
    return (x * stats.std + stats.mean).astype(np.float32)


def zero_center(pixels, mean):
    x = np.asarray(getattr(pixels, "pixels", pixels), dtype=np.float64)
    mean = getattr(mean, "mean", mean)
    return (x - mean).astype(np.float32)


def write_stats(path, stats: StandardizationStats, split="train", seed=None):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"{stats.mean!r},{stats.std!r}\n")
        fh.write(f"# computed on split={split} seed={seed}\n")


def read_stats(path) -> StandardizationStats:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                mean, std = line.split(",")
                return StandardizationStats(float(mean), float(std))
    raise ManifestFormatError(f"{path}: no 'mean,std' line")


# -- augmentation ------------------------------------------------------------

CROP_NAMES = ("top_left", "top_right", "bottom_left", "bottom_right", "center", "full")


def mirror(pixels):
    return np.ascontiguousarray(np.asarray(pixels)[..., ::-1])


def twelve_crop(sample, crop_w, crop_h):
    """Four corner crops, a centre crop and the full image resized to the crop
    size, followed by the horizontal mirror of each (12 outputs, in
    ``CROP_NAMES`` order then mirrored in the same order)."""
    label = getattr(sample, "label", None)
    x = np.asarray(getattr(sample, "pixels", sample), dtype=np.float32)
    _, h, w = x.shape
    if crop_w > w or crop_h > h or crop_w < 1 or crop_h < 1:
        raise SizingError(f"crop {crop_w}x{crop_h} does not fit a {w}x{h} image")
    top, left = (h - crop_h) // 2, (w - crop_w) // 2
    bases = [
        x[:, :crop_h, :crop_w],
        x[:, :crop_h, w - crop_w:],
        x[:, h - crop_h:, :crop_w],
        x[:, h - crop_h:, w - crop_w:],
        x[:, top:top + crop_h, left:left + crop_w],
        resize_bilinear(x, crop_h, crop_w),
    ]
    bases = [np.ascontiguousarray(b) for b in bases]
    out = bases + [mirror(b) for b in bases]
    if isinstance(sample, ImageSample):
        return [ImageSample(p, label) for p in out]
    return out


def augment_dataset(ds: Dataset, crop_w, crop_h) -> Dataset:
    images, records = [], []
    for img, rec in zip(ds.images, ds.records):
        images.extend(twelve_crop(img, crop_w, crop_h))
        records.extend([rec] * 12)
    return Dataset(np.stack(images), records)
