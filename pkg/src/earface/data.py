"""Manifest-driven dataset handling.

A manifest is a CSV with the header::

    sample_id,subject_id,ear_path,profile_path,age,gender,split

Empty cells mean "absent". Gender is ``F``/``M`` and split is one of
``train``/``val``/``test``. Relative image paths resolve against the
directory holding the manifest file.
"""

from __future__ import annotations

import csv
import logging
import math
import os
import warnings
from collections import OrderedDict, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image, UnidentifiedImageError
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from .errors import DataError, ImageReadError, OutOfRangeError
from .imageops import ImageTensor, resize_bilinear

logger = logging.getLogger(__name__)

MANIFEST_HEADER = ("sample_id", "subject_id", "ear_path", "profile_path", "age", "gender", "split")
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.8, 0.1, 0.1)

MIN_AGE = 18
# Lower edges of age groups 1..4; group 4 is open-ended upward.
AGE_GROUP_EDGES = (29, 39, 49, 59)
AGE_GROUP_LABELS = ("18-28", "29-38", "39-48", "49-58", "59+")
NUM_AGE_GROUPS = len(AGE_GROUP_LABELS)


class Gender(str, Enum):
    FEMALE = "female"
    MALE = "male"

    @property
    def index(self) -> int:
        return 0 if self is Gender.FEMALE else 1

    @classmethod
    def from_code(cls, code: str) -> "Gender":
        code = code.strip()
        table = {"F": cls.FEMALE, "M": cls.MALE, "female": cls.FEMALE, "male": cls.MALE}
        if code not in table:
            raise DataError(f"unknown gender code {code!r} (expected F or M)")
        return table[code]

    @property
    def code(self) -> str:
        return "F" if self is Gender.FEMALE else "M"


def bin_age(age_years: int) -> int:
    """Map an age in years to one of the five age-group indices.

    >>> bin_age(25), bin_age(30), bin_age(59), bin_age(80)
    (0, 1, 4, 4)
    """
    if age_years < MIN_AGE:
        raise OutOfRangeError(f"age {age_years} is below the youngest group (18-28)")
    group = 0
    for edge in AGE_GROUP_EDGES:
        if age_years >= edge:
            group += 1
    return group


@dataclass(frozen=True)
class SampleRecord:
    sample_id: str
    subject_id: str
    ear_image_ref: Optional[Path] = None
    profile_image_ref: Optional[Path] = None
    age_years: Optional[int] = None
    gender: Optional[Gender] = None
    split: Optional[str] = None

    def __post_init__(self):
        if not self.sample_id:
            raise DataError("sample_id must be non-empty")
        if self.age_years is not None and self.age_years < MIN_AGE:
            raise OutOfRangeError(f"sample {self.sample_id}: age {self.age_years} is below {MIN_AGE}")
        if self.age_years is None and self.gender is None:
            raise DataError(f"sample {self.sample_id} has neither age nor gender")
        if self.split is not None and self.split not in SPLITS:
            raise DataError(f"sample {self.sample_id}: unknown split {self.split!r}")

    @property
    def age_group(self) -> Optional[int]:
        return None if self.age_years is None else bin_age(self.age_years)

    def label(self, task: str) -> Optional[int]:
        """Class index of this record for ``task`` ('age' or 'gender')."""
        if task == "age":
            return self.age_group
        if task == "gender":
            return None if self.gender is None else self.gender.index
        raise DataError(f"unknown task {task!r}")


@dataclass
class DatasetManifest:
    records: list[SampleRecord]
    source_name: str = ""
    root: Optional[Path] = None

    def __post_init__(self):
        seen = set()
        for rec in self.records:
            if rec.sample_id in seen:
                raise DataError(f"duplicate sample_id {rec.sample_id!r} in manifest {self.source_name!r}")
            seen.add(rec.sample_id)

    def __iter__(self) -> Iterator[SampleRecord]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def subset(self, split: str) -> "DatasetManifest":
        return DatasetManifest([r for r in self.records if r.split == split], self.source_name, self.root)

    def has_labels(self, task: str) -> bool:
        return len(self.records) > 0 and all(r.label(task) is not None for r in self.records)

    def resolve(self, ref: Optional[Path]) -> Optional[Path]:
        if ref is None:
            return None
        ref = Path(ref)
        if not ref.is_absolute() and self.root is not None:
            return self.root / ref
        return ref

    def split_counts(self, task: Optional[str] = None) -> dict:
        """Counts per split, or per (class, split) when ``task`` is given."""
        if task is None:
            counts = {s: 0 for s in SPLITS}
            for r in self.records:
                if r.split is not None:
                    counts[r.split] += 1
            return counts
        table: dict[int, dict[str, int]] = defaultdict(lambda: {s: 0 for s in SPLITS})
        for r in self.records:
            if r.split is not None and r.label(task) is not None:
                table[r.label(task)][r.split] += 1
        return dict(sorted(table.items()))


def _parse_optional_int(text: str, line: int) -> Optional[int]:
    text = text.strip()
    if not text:
        return None
    try:
        return int(text)
    except ValueError:
        raise DataError(f"line {line}: age {text!r} is not an integer") from None


def read_manifest(path: str | Path, source_name: Optional[str] = None) -> DatasetManifest:
    """Parse a manifest CSV. Any malformed row raises :class:`DataError` naming its line."""
    path = Path(path)
    records = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty manifest") from None
        if tuple(h.strip() for h in header) != MANIFEST_HEADER:
            raise DataError(f"{path} line 1: expected header {','.join(MANIFEST_HEADER)}")
        seen: set[str] = set()
        for row in reader:
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise DataError(f"{path} line {line}: expected {len(MANIFEST_HEADER)} fields, got {len(row)}")
            sid, subj, ear, prof, age, gender, split = (c.strip() for c in row)
            if sid in seen:
                raise DataError(f"{path} line {line}: duplicate sample_id {sid!r}")
            seen.add(sid)
            try:
                records.append(
                    SampleRecord(
                        sample_id=sid,
                        subject_id=subj or sid,
                        ear_image_ref=Path(ear) if ear else None,
                        profile_image_ref=Path(prof) if prof else None,
                        age_years=_parse_optional_int(age, line),
                        gender=Gender.from_code(gender) if gender else None,
                        split=split or None,
                    )
                )
            except DataError as exc:
                msg = str(exc)
                if not msg.startswith("line"):
                    msg = f"line {line}: {msg}"
                raise DataError(f"{path} {msg}") from None
    return DatasetManifest(records, source_name or path.stem, path.parent)


def _ref_text(manifest: DatasetManifest, ref: Optional[Path], out_dir: Path) -> str:
    # re-anchor relative refs so the written file resolves from its own directory
    if ref is None:
        return ""
    target = manifest.resolve(ref)
    if ref.is_absolute() or manifest.root is None:
        return target.as_posix()
    return Path(os.path.relpath(target.absolute(), out_dir.absolute())).as_posix()


def write_manifest(manifest: DatasetManifest, path: str | Path) -> Path:
    """Write ``manifest`` as CSV; relative image paths are rewritten relative to ``path``'s directory."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(MANIFEST_HEADER)
        for r in manifest:
            writer.writerow(
                [
                    r.sample_id,
                    r.subject_id,
                    _ref_text(manifest, r.ear_image_ref, path.parent),
                    _ref_text(manifest, r.profile_image_ref, path.parent),
                    "" if r.age_years is None else r.age_years,
                    "" if r.gender is None else r.gender.code,
                    r.split or "",
                ]
            )
    return path


# ---------------------------------------------------------------------------
# stratified, subject-disjoint splitting
# ---------------------------------------------------------------------------


def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    exact = [total * r for r in ratios]
    counts = [math.floor(x) for x in exact]
    order = sorted(range(len(ratios)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def _controlled_rounding(class_sizes: list[int], ratios: Sequence[float], totals: list[int]) -> list[list[int]]:
    """Integer class x split table with row sums = class sizes and column sums = ``totals``.

    Every cell is the floor or ceiling of ``size * ratio``. Starting from the
    floors, the leftover units form a bipartite transport problem (class ->
    split, at most one extra unit per cell) solved as a max flow; such a
    rounding always exists when ``totals`` is itself a rounding of the
    column sums.
    """
    k, c = len(ratios), len(class_sizes)
    exact = [[n * r for r in ratios] for n in class_sizes]
    table = [[math.floor(x) for x in row] for row in exact]
    row_left = [n - sum(row) for n, row in zip(class_sizes, table)]
    col_left = [t - sum(table[i][s] for i in range(c)) for s, t in enumerate(totals)]

    # nodes: 0 source, 1..c classes, c+1..c+k splits, c+k+1 sink
    sink = c + k + 1
    cap = np.zeros((sink + 1, sink + 1), dtype=np.int32)
    for i in range(c):
        cap[0, 1 + i] = row_left[i]
        for s in range(k):
            if exact[i][s] > table[i][s]:
                cap[1 + i, 1 + c + s] = 1
    for s in range(k):
        cap[1 + c + s, sink] = max(col_left[s], 0)
    flow = maximum_flow(csr_matrix(cap), 0, sink).flow.toarray()
    for i in range(c):
        for s in range(k):
            if flow[1 + i, 1 + c + s] > 0:
                table[i][s] += 1
                row_left[i] -= 1
                col_left[s] -= 1
    # Unreachable totals (not a rounding of the column sums): keep rows exact anyway.
    for i in range(c):
        while row_left[i] > 0:
            s = max(range(k), key=lambda s: (col_left[s], exact[i][s] - table[i][s], -s))
            table[i][s] += 1
            row_left[i] -= 1
            col_left[s] -= 1
    return table


def _stratum_key(rec: SampleRecord, stratify_by: str):
    if stratify_by == "age_gender":
        key = (rec.label("age"), rec.label("gender"))
        return None if None in key else key
    return rec.label(stratify_by)


def stratified_split(
    manifest: DatasetManifest,
    ratios: Sequence[float] = DEFAULT_RATIOS,
    seed: int = 0,
    stratify_by: Optional[str] = None,
) -> DatasetManifest:
    """Assign train/val/test splits, stratified per class and disjoint per subject.

    ``stratify_by`` is ``"age"``, ``"gender"`` or ``"age_gender"``; by default
    age groups are used when every record has an age, gender otherwise. A
    subject's stratum is that of its first record. When every subject has one
    record, per-class split counts are within one sample of ``ratio * n`` and
    split totals follow largest-remainder rounding of ``ratio * N``.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != len(SPLITS) or any(r < 0 for r in ratios):
        raise DataError(f"ratios must be three non-negative fractions, got {ratios}")
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise DataError(f"ratios must sum to 1, got {sum(ratios)!r}")
    if stratify_by is None:
        stratify_by = "age" if manifest.has_labels("age") else "gender"
    if stratify_by not in ("age", "gender", "age_gender"):
        raise DataError(f"unknown stratification label {stratify_by!r}")

    subjects: "OrderedDict[str, list[int]]" = OrderedDict()
    for i, rec in enumerate(manifest.records):
        if _stratum_key(rec, stratify_by) is None:
            raise DataError(f"sample {rec.sample_id} has no {stratify_by} label for stratification")
        subjects.setdefault(rec.subject_id, []).append(i)

    strata: "OrderedDict[object, list[str]]" = OrderedDict()
    for subj, idx in subjects.items():
        strata.setdefault(_stratum_key(manifest.records[idx[0]], stratify_by), []).append(subj)
    strata = OrderedDict(sorted(strata.items(), key=lambda kv: kv[0]))

    assignment: dict[str, str] = {}
    regular = []
    for key, subj_list in strata.items():
        n = sum(len(subjects[s]) for s in subj_list)
        if n < len(SPLITS):
            warnings.warn(
                f"class {key!r} has {n} samples, fewer than {len(SPLITS)} splits; assigning all to train",
                stacklevel=2,
            )
            for s in subj_list:
                assignment[s] = "train"
        else:
            regular.append((key, subj_list, n))

    rng = np.random.default_rng(seed)
    sizes = [n for _, _, n in regular]
    totals = _largest_remainder(sum(sizes), ratios)
    quotas = _controlled_rounding(sizes, ratios, totals)
    for (key, subj_list, _), quota in zip(regular, quotas):
        order = [subj_list[i] for i in rng.permutation(len(subj_list))]
        order.sort(key=lambda s: -len(subjects[s]))
        remaining = list(quota)
        for subj in order:
            s = max(range(len(SPLITS)), key=lambda j: (remaining[j], -j))
            assignment[subj] = SPLITS[s]
            remaining[s] -= len(subjects[subj])

    records = [replace(r, split=assignment[r.subject_id]) for r in manifest.records]
    return DatasetManifest(records, manifest.source_name, manifest.root)


# ---------------------------------------------------------------------------
# images and modality pairing
# ---------------------------------------------------------------------------


def load_image(ref: str | Path, target_size: tuple[int, int] = (224, 224)) -> ImageTensor:
    """Decode an 8-bit image as RGB floats in [0, 1], resized bilinearly to ``target_size``."""
    path = Path(ref)
    try:
        with Image.open(path) as im:
            if im.mode not in ("RGB", "RGBA", "L", "P", "LA"):
                raise ImageReadError(path, f"unsupported mode {im.mode}")
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
    except ImageReadError:
        raise
    except (OSError, UnidentifiedImageError, SyntaxError, ValueError) as exc:
        raise ImageReadError(path, str(exc)) from exc
    img = arr.astype(np.float32) / np.float32(255.0)
    return resize_bilinear(img, target_size)


@dataclass
class ModalPair:
    sample_id: str
    profile: ImageTensor
    ear: ImageTensor
    age_group: Optional[int] = None
    gender: Optional[Gender] = None
    split: Optional[str] = None

    def __post_init__(self):
        if self.profile.shape != self.ear.shape:
            raise DataError(f"{self.sample_id}: profile {self.profile.shape} and ear {self.ear.shape} differ in shape")

    def label(self, task: str) -> Optional[int]:
        if task == "age":
            return self.age_group
        if task == "gender":
            return None if self.gender is None else self.gender.index
        raise DataError(f"unknown task {task!r}")


@dataclass
class Pairing:
    """Result of :func:`pair_modalities`: loaded pairs plus skipped sample ids."""

    pairs: list[ModalPair]
    skipped: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter(self.pairs)

    def __len__(self):
        return len(self.pairs)

    def __getitem__(self, i):
        return self.pairs[i]

    @property
    def skip_count(self) -> int:
        return len(self.skipped)


def pair_modalities(
    manifest: DatasetManifest,
    target_size: tuple[int, int] = (224, 224),
    workers: int = 1,
) -> Pairing:
    """Load both modalities of every record; records with a missing file are skipped."""
    jobs, skipped = [], []
    for rec in manifest:
        ear = manifest.resolve(rec.ear_image_ref)
        prof = manifest.resolve(rec.profile_image_ref)
        missing = [name for name, p in (("ear", ear), ("profile", prof)) if p is None or not p.is_file()]
        if missing:
            logger.warning("skipping %s: missing %s image", rec.sample_id, " and ".join(missing))
            skipped.append(rec.sample_id)
            continue
        jobs.append((rec, prof, ear))

    def load(job):
        rec, prof, ear = job
        return ModalPair(
            sample_id=rec.sample_id,
            profile=load_image(prof, target_size),
            ear=load_image(ear, target_size),
            age_group=rec.age_group,
            gender=rec.gender,
            split=rec.split,
        )

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            pairs = list(pool.map(load, jobs))
    else:
        pairs = [load(j) for j in jobs]
    if skipped:
        logger.warning("pair_modalities: skipped %d of %d records", len(skipped), len(manifest))
    return Pairing(pairs, skipped)
