"""Age label encodings over integer ages 5..85 and their decoders."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

AGE_MIN = 5
AGE_MAX = 85
AGES = np.arange(AGE_MIN, AGE_MAX + 1)
N_AGES = AGES.size  # 81


class AgeRangeError(ValueError):
    pass


class DegenerateDistributionError(ValueError):
    pass


def _check_age(age):
    if not AGE_MIN <= age <= AGE_MAX:
        raise AgeRangeError(f"age {age} outside the encoding range {AGE_MIN}..{AGE_MAX}")


@dataclass(frozen=True)
class AlphaSchedule:
    """Gaussian spread per age: constant, or linear from ``alpha_min`` at age 5
    to ``alpha_max`` at age 85."""

    kind: str = "static"
    alpha: float = 2.5
    alpha_min: float = 1.0
    alpha_max: float = 3.5

    def __post_init__(self):
        if self.kind == "static":
            if self.alpha <= 0:
                raise ValueError(f"alpha must be positive, got {self.alpha}")
        elif self.kind == "linear":
            if not 0 < self.alpha_min <= self.alpha_max:
                raise ValueError(f"need 0 < alpha_min <= alpha_max, got "
                                 f"{self.alpha_min}, {self.alpha_max}")
        else:
            raise ValueError(f"unknown alpha schedule {self.kind!r}")

    @classmethod
    def static(cls, alpha=2.5):
        return cls("static", alpha=alpha)

    @classmethod
    def linear(cls, alpha_min, alpha_max):
        return cls("linear", alpha_min=alpha_min, alpha_max=alpha_max)

    @classmethod
    def parse(cls, text: str) -> "AlphaSchedule":
        """``"2.5"`` -> static, ``"1-4"`` -> linear(1, 4)."""
        text = str(text).strip()
        lo, sep, hi = text.partition("-")
        if sep and lo:
            return cls.linear(float(lo), float(hi))
        return cls.static(float(text))

    def label(self) -> str:
        if self.kind == "static":
            return f"alpha={self.alpha:g}"
        return f"alpha={self.alpha_min:g}-{self.alpha_max:g}"


def alpha_for_age(age, schedule: AlphaSchedule) -> float:
    _check_age(age)
    if schedule.kind == "static":
        return float(schedule.alpha)
    span = schedule.alpha_max - schedule.alpha_min
    return float(schedule.alpha_min + span * (age - AGE_MIN) / (AGE_MAX - AGE_MIN))


def one_hot_encode(age: int) -> np.ndarray:
    _check_age(age)
    out = np.zeros(N_AGES)
    out[int(age) - AGE_MIN] = 1.0
    return out


def ldae_encode(age, schedule: AlphaSchedule | float = 2.5) -> np.ndarray:
    """Gaussian density centred on ``age`` sampled at each integer age.

    The vector is deliberately not renormalised; tails past 5 and 85 are
    simply cut off. ``decode_expected_value`` normalises instead.
    """
    if not isinstance(schedule, AlphaSchedule):
        schedule = AlphaSchedule.static(schedule)
    alpha = alpha_for_age(age, schedule)
    d = AGES - float(age)
    return np.exp(-d * d / (2 * alpha * alpha)) / (alpha * math.sqrt(2 * math.pi))


def encode_batch(ages, encoding="ldae", schedule: AlphaSchedule | None = None) -> np.ndarray:
    schedule = schedule or AlphaSchedule()
    if encoding == "onehot":
        rows = [one_hot_encode(int(a)) for a in ages]
    elif encoding == "ldae":
        rows = [ldae_encode(a, schedule) for a in ages]
    else:
        raise ValueError(f"unknown encoding {encoding!r}")
    return np.array(rows, dtype=np.float32).reshape(len(rows), N_AGES)


def decode_argmax(dist) -> int:
    # np.argmax returns the first maximum, i.e. ties go to the youngest age
    return int(AGE_MIN + np.argmax(np.asarray(dist)))


def decode_expected_value(dist) -> float:
    p = np.asarray(dist, dtype=np.float64)
    total = p.sum()
    if not total > 0:
        raise DegenerateDistributionError("cannot decode an all-zero distribution")
    return float((AGES * p).sum() / total)


def decode_batch(dists, decoder="expected_value") -> np.ndarray:
    p = np.asarray(dists, dtype=np.float64)
    if decoder == "argmax":
        return (AGE_MIN + p.argmax(axis=1)).astype(np.float64)
    if decoder == "expected_value":
        total = p.sum(axis=1)
        if np.any(total <= 0):
            raise DegenerateDistributionError("cannot decode an all-zero distribution")
        return (p * AGES).sum(axis=1) / total
    raise ValueError(f"unknown decoder {decoder!r}")


def entropy(dist) -> float:
    """Shannon entropy of the normalised distribution."""
    p = np.asarray(dist, dtype=np.float64)
    p = p / p.sum()
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def distribution_rows(ages, encoding="ldae", schedule=None):
    """Rows ``[age, p5, ..., p85]`` for the ``encode`` CSV."""
    table = encode_batch(ages, encoding, schedule).astype(np.float64)
    if encoding == "ldae":
        # recompute in float64 so the CSV carries the exact formula values
        table = np.array([ldae_encode(a, schedule or AlphaSchedule()) for a in ages])
    return [[int(a)] + list(row) for a, row in zip(ages, table)]


def csv_header():
    return ["age"] + [f"p{a}" for a in AGES]
