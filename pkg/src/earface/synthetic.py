"""Synthetic paired profile/ear images with controllable label cues.

Profile images carry the age signal: a bright horizontal band whose row
position encodes the age group. They also carry a weak gender cue (a green
shift that agrees with the true gender only with probability
``profile_gender_reliability``). Ear images carry no age information and a
strong gender cue: a red (male) or blue (female) blob in the middle of the
frame. A model therefore needs both modalities to do well on both tasks.

The ``proxy`` domain renders the same cues with a brighter, noisier
background and a different band contrast; it stands in for the large
ear-domain corpus used for intermediate fine-tuning.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from PIL import Image

from .data import (
    AGE_GROUP_EDGES,
    MIN_AGE,
    NUM_AGE_GROUPS,
    DatasetManifest,
    Gender,
    SampleRecord,
    read_manifest,
    stratified_split,
    write_manifest,
)


@dataclass(frozen=True)
class DomainStyle:
    background: float
    noise: float
    band_gain: float
    blob_gain: float


DOMAINS = {
    "target": DomainStyle(background=0.30, noise=0.12, band_gain=0.30, blob_gain=0.30),
    "proxy": DomainStyle(background=0.45, noise=0.16, band_gain=0.25, blob_gain=0.30),
}

_AGE_RANGES = [(MIN_AGE, AGE_GROUP_EDGES[0] - 1)] + [
    (lo, hi - 1) for lo, hi in zip(AGE_GROUP_EDGES[:-1], AGE_GROUP_EDGES[1:])
] + [(AGE_GROUP_EDGES[-1], 75)]


def render_pair(
    rng: np.random.Generator,
    age_group: int,
    gender: Gender,
    size: int = 32,
    domain: str = "target",
    profile_gender_reliability: float = 0.6,
) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(profile, ear)`` float images of shape (size, size, 3) in [0, 1]."""
    style = DOMAINS[domain]
    male = gender is Gender.MALE

    profile = style.background + style.noise * rng.standard_normal((size, size, 3))
    lo = int(round(age_group * size / NUM_AGE_GROUPS))
    hi = int(round((age_group + 1) * size / NUM_AGE_GROUPS))
    profile[lo:hi, :, :] += style.band_gain
    cue_male = male if rng.random() < profile_gender_reliability else not male
    profile[:, :, 1] += 0.06 if cue_male else -0.06

    ear = style.background + style.noise * rng.standard_normal((size, size, 3))
    yy, xx = np.mgrid[0:size, 0:size]
    blob = ((yy - size / 2) / (0.35 * size)) ** 2 + ((xx - size / 2) / (0.22 * size)) ** 2 <= 1.0
    ear[blob, 0 if male else 2] += style.blob_gain
    return np.clip(profile, 0, 1).astype(np.float32), np.clip(ear, 0, 1).astype(np.float32)


def _to_png(img: np.ndarray, path: Path) -> None:
    Image.fromarray(np.round(img * 255).astype(np.uint8), mode="RGB").save(path)


def make_synthetic_dataset(
    out_dir: str | Path,
    n: int,
    seed: int = 0,
    size: int = 32,
    domain: str = "target",
    class_weights: Optional[Sequence[float]] = None,
    ratios: Optional[Sequence[float]] = (0.8, 0.1, 0.1),
    profile_gender_reliability: float = 0.6,
    with_age: bool = True,
    prefix: str = "",
) -> DatasetManifest:
    """Write ``n`` synthetic pairs as PNG files plus ``manifest.csv`` under ``out_dir``.

    Age groups are drawn from ``class_weights`` (uniform by default) and
    gender is balanced at random; each sample is its own subject. When
    ``ratios`` is given the manifest is stratified-split with ``seed``.
    Returns the manifest as read back from disk.
    """
    out = Path(out_dir)
    (out / "ear").mkdir(parents=True, exist_ok=True)
    (out / "profile").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    weights = np.ones(NUM_AGE_GROUPS) if class_weights is None else np.asarray(class_weights, dtype=float)
    weights = weights / weights.sum()
    records = []
    for i in range(n):
        group = int(rng.choice(NUM_AGE_GROUPS, p=weights))
        gender = Gender.MALE if rng.random() < 0.5 else Gender.FEMALE
        lo, hi = _AGE_RANGES[group]
        age = int(rng.integers(lo, hi + 1))
        profile, ear = render_pair(rng, group, gender, size, domain, profile_gender_reliability)
        sid = f"{prefix}{domain}_{i:05d}"
        _to_png(ear, out / "ear" / f"{sid}.png")
        _to_png(profile, out / "profile" / f"{sid}.png")
        records.append(
            SampleRecord(
                sample_id=sid,
                subject_id=sid,
                ear_image_ref=Path("ear") / f"{sid}.png",
                profile_image_ref=Path("profile") / f"{sid}.png",
                age_years=age if with_age else None,
                gender=gender,
            )
        )
    manifest = DatasetManifest(records, f"synthetic-{domain}", out)
    if ratios is not None:
        manifest = stratified_split(manifest, ratios, seed=seed, stratify_by="age" if with_age else "gender")
    write_manifest(manifest, out / "manifest.csv")
    return read_manifest(out / "manifest.csv", source_name=f"synthetic-{domain}")
