"""Deterministic synthetic face stand-ins and Table-I-shaped rosters.

Each image is a dark background with a centred, anti-aliased disc. The
disc radius is ``radius_scale * age`` pixels. Gender is a left/right
brightness asymmetry of the disc: for males the left half is bright and the
right half dim, for females the reverse. Both cues can be read back exactly
from a noise-free image (see ``gender_from_pixels`` / ``age_from_pixels``).
"""

from __future__ import annotations

import csv
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np

from .data import LabelRecord, write_labels, write_netpbm

SUPERSAMPLE = 8

# age bins x gender counts of the full reference roster
REFERENCE_COUNTS = {
    "M": {(16, 19): 6649, (20, 29): 14009, (30, 39): 12436, (40, 49): 10082, (50, 77): 3468},
    "F": {(16, 19): 836, (20, 29): 2305, (30, 39): 2924, (40, 49): 1978, (50, 77): 447},
}
BLACK_FRACTION = 0.7722
WHITE_FRACTION = 0.19


class SelfCheckError(RuntimeError):
    pass


@dataclass(frozen=True)
class SyntheticSpec:
    size: int = 64
    count: int = 2000
    age_min: int = 16
    age_max: int = 77
    male_fraction: float = 0.75
    noise: float = 10.0
    seed: int = 0
    radius_scale: float = 0.4
    background: int = 60
    bright: int = 200
    dim: int = 130

    def __post_init__(self):
        if self.size < 4 or self.size % 2:
            raise ValueError("image size must be an even integer >= 4")
        if self.radius_scale * self.age_max > self.size / 2:
            raise ValueError(f"disc for age {self.age_max} (radius "
                             f"{self.radius_scale * self.age_max:.1f}) does not fit a "
                             f"{self.size}px image")
        if not 0 <= self.male_fraction <= 1:
            raise ValueError("male_fraction must lie in [0, 1]")
        if not self.background < self.dim < self.bright <= 255:
            raise ValueError("need background < dim < bright <= 255")


@lru_cache(maxsize=512)
def disc_coverage(size: int, radius: float) -> np.ndarray:
    """Fraction of each pixel covered by a disc centred on the image centre."""
    ss = SUPERSAMPLE
    sub = (np.arange(size * ss) + 0.5) / ss - size / 2
    inside = (sub[:, None] ** 2 + sub[None, :] ** 2) <= radius * radius
    cov = inside.reshape(size, ss, size, ss).mean(axis=(1, 3))
    cov.setflags(write=False)
    return cov


def sample_label(spec: SyntheticSpec, index: int):
    rng = np.random.default_rng([spec.seed, index])
    gender = "M" if rng.random() < spec.male_fraction else "F"
    age = int(rng.integers(spec.age_min, spec.age_max + 1))
    u = rng.random()
    race = "B" if u < BLACK_FRACTION else "W" if u < BLACK_FRACTION + WHITE_FRACTION else "O"
    return gender, age, race, rng


def render_clean(spec: SyntheticSpec, gender: str, age: int) -> np.ndarray:
    """Noise-free float image ``(H, W)``."""
    cov = disc_coverage(spec.size, spec.radius_scale * age)
    half = spec.size // 2
    left, right = (spec.bright, spec.dim) if gender == "M" else (spec.dim, spec.bright)
    level = np.empty(spec.size)
    level[:half], level[half:] = left, right
    return spec.background + cov * (level[None, :] - spec.background)


def render(spec: SyntheticSpec, index: int):
    """Return ``(uint8 image (1, H, W), gender, age, race)`` for one index."""
    gender, age, race, rng = sample_label(spec, index)
    img = render_clean(spec, gender, age)
    if spec.noise > 0:
        img = img + rng.normal(0.0, spec.noise, img.shape)
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)[None], gender, age, race


def gender_from_pixels(img) -> str:
    x = np.asarray(img, dtype=np.float64).reshape(np.shape(img)[-2:])
    half = x.shape[1] // 2
    return "M" if x[:, :half].mean() > x[:, half:].mean() else "F"


def age_from_pixels(img, spec: SyntheticSpec) -> int:
    """Invert the disc: per-pixel coverage -> area -> radius -> age."""
    x = np.asarray(img, dtype=np.float64).reshape(np.shape(img)[-2:])
    half = x.shape[1] // 2
    gender = gender_from_pixels(x)
    left, right = (spec.bright, spec.dim) if gender == "M" else (spec.dim, spec.bright)
    level = np.empty(x.shape[1])
    level[:half], level[half:] = left, right
    cov = np.clip((x - spec.background) / (level[None, :] - spec.background), 0, 1)
    radius = np.sqrt(cov.sum() / np.pi)
    return int(round(radius / spec.radius_scale))


def self_check(spec: SyntheticSpec, indices=None):
    """Verify both cues are exactly recoverable from noise-free renderings."""
    clean = SyntheticSpec(**{**asdict(spec), "noise": 0.0})
    for i in (range(spec.count) if indices is None else indices):
        img, gender, age, _ = render(clean, i)
        if gender_from_pixels(img) != gender:
            raise SelfCheckError(f"sample {i}: gender cue not recoverable")
        got = age_from_pixels(img, clean)
        if got != age:
            raise SelfCheckError(f"sample {i}: age {age} read back as {got}")


def generate(spec: SyntheticSpec):
    """Images ``(N, 1, H, W)`` uint8 and matching label records."""
    images, records = [], []
    for i in range(spec.count):
        img, gender, age, race = render(spec, i)
        images.append(img)
        records.append(LabelRecord(f"syn{spec.seed}_{i:06d}", f"img/{i:06d}.pgm", age, gender, race))
    return np.stack(images) if images else np.zeros((0, 1, spec.size, spec.size), np.uint8), records


def write_synthetic(spec: SyntheticSpec, out_dir, check=True):
    """Write PGMs under ``out_dir/img`` plus ``out_dir/manifest.csv``."""
    if check:
        self_check(spec)
    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    images, records = generate(spec)
    for img, rec in zip(images, records):
        write_netpbm(out / rec.image_path, img)
    write_labels(records, out / "manifest.csv")
    with open(out / "synth_spec.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["key", "value"])
        writer.writerows(asdict(spec).items())
    return out / "manifest.csv"


def reference_roster(seed=0, images_per_subject=4):
    """A label-only roster whose age-bin x gender counts equal the reference
    table (55,134 records). Races follow the reference marginals; images are
    grouped into subjects of one gender and race."""
    rng = np.random.default_rng(seed)
    records = []
    n = 0
    for gender in ("M", "F"):
        rows = []
        for (lo, hi), count in REFERENCE_COUNTS[gender].items():
            rows.extend(int(a) for a in rng.integers(lo, hi + 1, count))
        races = rng.random(len(rows))
        race_codes = np.where(races < BLACK_FRACTION, "B",
                              np.where(races < BLACK_FRACTION + WHITE_FRACTION, "W", "O"))
        order = np.argsort(race_codes, kind="stable")
        for j, k in enumerate(order):
            sid = f"{gender}{race_codes[k]}{j // images_per_subject:05d}"
            records.append(LabelRecord(sid, f"img/{n:06d}.pgm", rows[k], gender, str(race_codes[k])))
            n += 1
    return records
