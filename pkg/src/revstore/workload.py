"""Deterministic synthetic backup series.

A simulated file system is a list of files with pseudorandom content.  Each
weekday touches ``alpha`` percent of the files, rewriting one contiguous,
block-aligned run covering ``beta`` percent of each, then adds ``gamma``
bytes of new files.  A weekly full backup is the flat disk image: files laid
out in id order at block-aligned extents, the rest zero-filled.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Iterator

import numpy as np

KiB, MiB, GiB = 1 << 10, 1 << 20, 1 << 30
BLOCK = 4 * KiB
MIN_FILE, MAX_FILE = 4 * KiB, 1 * MiB


class WorkloadError(ValueError):
    pass


@dataclass(frozen=True)
class WorkloadParams:
    image_size: int = 64 * MiB
    initial_fill: int = 16 * MiB
    alpha: float = 2.0
    beta: float = 10.0
    gamma: int = 160 * KiB
    weeks: int = 12
    series_count: int = 1
    seed: int = 0
    initial_files: int = 62
    weekdays_per_week: int = 5

    def __post_init__(self):
        if self.initial_fill > self.image_size:
            raise WorkloadError("initial fill exceeds the image size")
        if not (0 < self.alpha <= 100 and 0 < self.beta <= 100):
            raise WorkloadError("alpha and beta must lie in (0, 100]")
        if self.weeks < 1 or self.series_count < 1 or self.initial_files < 1:
            raise WorkloadError("weeks, series_count and initial_files must be positive")


# (alpha %, beta %, gamma MiB at full scale)
DATASETS = {
    "sg1": (2, 10, 10),
    "sg2": (4, 10, 10),
    "sg3": (2, 20, 10),
    "sg4": (2, 10, 20),
    "sg5": (10, 10, 10),
    "gp": (2, 10, 10),
}


def parse_scale(text: str | float | Fraction) -> Fraction:
    scale = Fraction(text) if not isinstance(text, float) else Fraction(text).limit_denominator()
    if not 0 < scale <= 1:
        raise WorkloadError("scale must lie in (0, 1]")
    return scale


def dataset(name: str, scale="1/64", seed: int = 0, weeks: int | None = None
            ) -> WorkloadParams:
    """Parameters for a named dataset.

    Full scale is an 8GiB image with 1.1GiB of initial files and 78 weekly
    backups (GP: 16 series of 20).  Reduced scales shrink the initial fill,
    file count and daily growth by the factor, use an image four times the
    initial fill, and default to 12 weeks.
    """
    if name not in DATASETS:
        raise WorkloadError(f"unknown dataset {name!r}")
    alpha, beta, gamma_mib = DATASETS[name]
    scale = parse_scale(scale)
    gp = name == "gp"
    if scale == 1:
        p = WorkloadParams(image_size=8 * GiB, initial_fill=int(1.1 * GiB), alpha=alpha,
                           beta=beta, gamma=gamma_mib * MiB, weeks=20 if gp else 78,
                           initial_files=4000)
    else:
        p = WorkloadParams(image_size=int(4 * GiB * scale), initial_fill=int(GiB * scale),
                           alpha=alpha, beta=beta, gamma=int(gamma_mib * MiB * scale),
                           weeks=12, initial_files=max(1, round(4000 * scale)))
    return replace(p, series_count=16 if gp else 1, seed=seed,
                   weeks=weeks if weeks is not None else p.weeks)


@dataclass
class SimFile:
    file_id: int
    data: bytearray
    mutations: int = 0


@dataclass
class SimFs:
    files: list[SimFile] = field(default_factory=list)

    @property
    def used(self) -> int:
        return sum(_align(len(f.data)) for f in self.files)

    def add(self, data: bytes) -> SimFile:
        f = SimFile(len(self.files), bytearray(data))
        self.files.append(f)
        return f


def _align(n: int) -> int:
    return -(-n // BLOCK) * BLOCK


def _file_sizes(rng: np.random.Generator, count: int) -> np.ndarray:
    return np.exp(rng.uniform(math.log(MIN_FILE), math.log(MAX_FILE), count)).astype(np.int64)


def initial_fs(params: WorkloadParams, rng: np.random.Generator) -> SimFs:
    sizes = _file_sizes(rng, params.initial_files).astype(np.float64)
    sizes = np.maximum(1, np.floor(sizes * params.initial_fill / sizes.sum())).astype(np.int64)
    sizes[-1] += params.initial_fill - int(sizes.sum())
    fs = SimFs()
    for s in sizes:
        fs.add(rng.bytes(int(s)))
    return fs


def mutate_day(fs: SimFs, params: WorkloadParams, rng: np.random.Generator) -> None:
    if fs.files:
        count = min(len(fs.files), math.ceil(params.alpha / 100 * len(fs.files)))
        for idx in sorted(rng.choice(len(fs.files), size=count, replace=False).tolist()):
            f = fs.files[idx]
            size = len(f.data)
            if size == 0:
                continue
            nbytes = min(size, math.ceil(params.beta / 100 * size))
            start = int(rng.integers(0, (size - nbytes) // BLOCK + 1)) * BLOCK
            start = min(start, size - nbytes)
            f.data[start:start + nbytes] = rng.bytes(nbytes)
            f.mutations += 1
    remaining = params.gamma
    while remaining > 0:
        size = min(remaining, int(_file_sizes(rng, 1)[0]))
        fs.add(rng.bytes(size))
        remaining -= size
    if fs.used > params.image_size:
        raise WorkloadError(f"file system outgrew the {params.image_size}-byte image")


def render_image(fs: SimFs, image_size: int) -> bytes:
    image = np.zeros(image_size, dtype=np.uint8)
    pos = 0
    for f in fs.files:
        end = pos + len(f.data)
        if end > image_size:
            raise WorkloadError(f"file system outgrew the {image_size}-byte image")
        image[pos:end] = np.frombuffer(f.data, dtype=np.uint8)
        pos = _align(end)
    return image.tobytes()


def digest(data) -> str:
    return hashlib.sha1(data).hexdigest()


def gen_series(params: WorkloadParams, series: int = 0) -> Iterator[tuple[int, bytes, str]]:
    """Yield (week, image, digest) for one series; week 0 is the initial image."""
    seq = np.random.SeedSequence([params.seed, series])
    rng = np.random.default_rng(seq)
    fs = initial_fs(params, rng)
    for week in range(params.weeks):
        if week:
            for _ in range(params.weekdays_per_week):
                mutate_day(fs, params, rng)
        image = render_image(fs, params.image_size)
        yield week, image, digest(image)


def gen_dataset(params: WorkloadParams) -> Iterator[tuple[int, int, bytes, str]]:
    """Yield (series, week, image, digest), series by series."""
    for s in range(params.series_count):
        for week, image, dg in gen_series(params, s):
            yield s, week, image, dg
