"""Manifests, patient-grouped split planning and the synthetic nodule generator."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .features import read_pgm, write_pgm

SCORE_RANGE = range(1, 6)
DEFAULT_CLASS_WEIGHTS = (0.2, 1.0)


class ManifestError(ValueError):
    pass


class InfeasibleSplitError(ValueError):
    pass


def label_for_score(score: int) -> int:
    if score not in SCORE_RANGE:
        raise ManifestError(f"invalid score {score}: expected an integer in 1..5")
    return 0 if score <= 2 else 1


@dataclass(frozen=True)
class Sample:
    image_path: Path
    patient_id: str
    score: int

    @property
    def label(self) -> int:
        return label_for_score(self.score)


@dataclass
class DatasetManifest:
    samples: list[Sample]
    name: str = ""
    boxes: dict[str, tuple[int, int, int, int]] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples], dtype=np.int64)

    @property
    def patients(self) -> list[str]:
        return [s.patient_id for s in self.samples]

    def class_counts(self) -> tuple[int, int]:
        lab = self.labels
        return int((lab == 0).sum()), int((lab == 1).sum())

    @property
    def patient_set(self) -> set[str]:
        return set(self.patients)

    def subset(self, idx: Sequence[int], name: str | None = None) -> "DatasetManifest":
        return DatasetManifest([self.samples[i] for i in idx], name or self.name, self.boxes)

    def box(self, sample: Sample) -> tuple[int, int, int, int] | None:
        return self.boxes.get(sample.image_path.name)

    def load_images(self) -> list[np.ndarray]:
        return [read_pgm(s.image_path) for s in self.samples]


def load_manifest(path: str | Path, name: str | None = None, check_images: bool = True) -> DatasetManifest:
    """Read ``image_path,patient_id,score`` rows; paths resolve against the CSV's directory."""
    path = Path(path)
    root = path.parent
    samples = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["image_path", "patient_id", "score"]:
            raise ManifestError(f"{path}:1: expected header image_path,patient_id,score, got {header}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise ManifestError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
            rel, pid, score_s = (c.strip() for c in row)
            try:
                score = int(score_s)
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: score {score_s!r} is not an integer") from None
            if score not in SCORE_RANGE:
                raise ManifestError(f"{path}:{lineno}: invalid score {score}: expected 1..5")
            img = (root / rel).resolve()
            if check_images:
                if not img.exists():
                    raise ManifestError(f"{path}:{lineno}: missing image {img}")
                try:
                    read_pgm(img)
                except Exception as exc:
                    raise ManifestError(f"{path}:{lineno}: unreadable image {img}: {exc}") from None
            samples.append(Sample(img, pid, score))
    boxes = {}
    box_file = root / "boxes.json"
    if box_file.exists():
        boxes = {k: tuple(v) for k, v in json.loads(box_file.read_text()).items()}
    return DatasetManifest(samples, name if name is not None else path.stem, boxes)


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    path = Path(path)
    root = path.parent.resolve()
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_path", "patient_id", "score"])
        for s in manifest.samples:
            w.writerow([Path(s.image_path).resolve().relative_to(root).as_posix(), s.patient_id, s.score])


def check_disjoint(a: DatasetManifest, b: DatasetManifest) -> None:
    shared = a.patient_set & b.patient_set
    if shared:
        raise ManifestError(
            f"patient leakage: {len(shared)} patient(s) shared between {a.name!r} and {b.name!r}, "
            f"e.g. {sorted(shared)[:3]}")


# ---------------------------------------------------------------------------
# splits

@dataclass
class SplitPlan:
    repetitions: list[tuple[list[int], list[int]]]
    seed: int
    train_fraction: float

    def to_json(self) -> str:
        return json.dumps({
            "seed": self.seed,
            "train_fraction": self.train_fraction,
            "repetitions": [{"train": tr, "test": te} for tr, te in self.repetitions],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SplitPlan":
        d = json.loads(text)
        return cls([(r["train"], r["test"]) for r in d["repetitions"]], d["seed"], d["train_fraction"])


def _patient_groups(labels: np.ndarray, patients: Sequence[str]) -> dict[int, list[tuple[str, list[int]]]]:
    """Patients per stratum; a patient's stratum is the majority label of its samples."""
    members: dict[str, list[int]] = {}
    for i, p in enumerate(patients):
        members.setdefault(p, []).append(i)
    strata: dict[int, list[tuple[str, list[int]]]] = {0: [], 1: []}
    for p in sorted(members):
        idx = members[p]
        strata[int(labels[idx].mean() >= 0.5)].append((p, idx))
    return strata


def _pick_test(sizes: list[int], target: int, rng: np.random.Generator) -> set[int]:
    """Choose patients whose sizes sum close to ``target``: random-order greedy, then swap repair."""
    order = [int(i) for i in rng.permutation(len(sizes))]
    test, total = set(), 0
    for i in order:
        if total + sizes[i] <= target:
            test.add(i)
            total += sizes[i]
    if not test and order:
        # never leave a class without test patients; smallest patient goes in
        i = min(order, key=lambda k: sizes[k])
        test.add(i)
        total += sizes[i]
    # one pass of single swaps to close the remaining gap
    gap = target - total
    if gap:
        for out_i in sorted(test, key=lambda k: order.index(k)):
            for in_i in order:
                if in_i in test:
                    continue
                delta = sizes[in_i] - sizes[out_i]
                if abs(gap - delta) < abs(gap):
                    test.remove(out_i)
                    test.add(in_i)
                    gap -= delta
                    break
            if gap == 0:
                break
    if len(test) == len(sizes):
        # keep at least one patient of this class in training
        test.remove(max(test, key=lambda k: (sizes[k], -order.index(k))))
    return test


def split_indices(labels: np.ndarray, patients: Sequence[str], test_fraction: float,
                  rng: np.random.Generator) -> tuple[list[int], list[int]]:
    labels = np.asarray(labels)
    strata = _patient_groups(labels, patients)
    for cls in (0, 1):
        if len(strata[cls]) < 2:
            raise InfeasibleSplitError(
                f"class {cls} has {len(strata[cls])} patient(s); at least 2 are needed for a grouped split")
    train, test = [], []
    for cls in (0, 1):
        groups = strata[cls]
        sizes = [len(idx) for _, idx in groups]
        target = int(round(test_fraction * sum(sizes)))
        chosen = _pick_test(sizes, target, rng)
        for k, (_, idx) in enumerate(groups):
            (test if k in chosen else train).extend(idx)
    return sorted(train), sorted(test)


def plan_splits(manifest: DatasetManifest, repetitions: int = 10, train_fraction: float = 0.8,
                seed: int = 0) -> SplitPlan:
    """Independent stratified, patient-grouped random splits (Monte-Carlo CV)."""
    if not 0 < train_fraction < 1:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    labels, patients = manifest.labels, manifest.patients
    reps = []
    for r in range(repetitions):
        rng = np.random.default_rng([seed, r])
        reps.append(split_indices(labels, patients, 1 - train_fraction, rng))
    return SplitPlan(reps, seed, train_fraction)


def class_weights(manifest: DatasetManifest, mode: str = "fixed",
                  weights: tuple[float, float] = DEFAULT_CLASS_WEIGHTS) -> tuple[float, float]:
    """Per-class loss weights (benign, malignant).

    ``fixed`` returns ``weights``; ``balanced`` uses inverse frequency scaled so
    the rarer class weighs 1.
    """
    n0, n1 = manifest.class_counts()
    if n0 == 0 or n1 == 0:
        raise ManifestError(f"class weights need both classes present, got counts benign={n0} malignant={n1}")
    if mode == "fixed":
        return float(weights[0]), float(weights[1])
    if mode == "balanced":
        m = min(n0, n1)
        return m / n0, m / n1
    raise ValueError(f"unknown class-weight mode {mode!r}")


# ---------------------------------------------------------------------------
# synthetic nodules

def _speckle(rng: np.random.Generator, size: int) -> np.ndarray:
    """Smoothed Rayleigh speckle with a depth gradient, roughly in [0, 1]."""
    sp = rng.rayleigh(1.0, (size, size))
    sp = (sp + np.roll(sp, 1, 0) + np.roll(sp, 1, 1) + np.roll(sp, (1, 1), (0, 1))) / 4.0
    depth = np.linspace(1.0, 0.75, size)[:, None]
    return 0.42 * sp / 1.25 * depth


def render_nodule(rng: np.random.Generator, size: int, malignant: bool) -> tuple[np.ndarray, tuple[int, int, int, int]]:
    """One synthetic ultrasound frame and the nodule's bounding box (r0, c0, r1, c1), exclusive ends.

    Class cues overlap on purpose: malignant nodules tend to be darker, have
    lobulated margins and carry a faint interior microtexture (a few grey
    levels, much clearer in LBP codes than in raw intensity); benign
    interiors are mostly flat.
    """
    img = _speckle(rng, size)
    rr, cc = np.mgrid[0:size, 0:size].astype(np.float64)
    cy = rng.uniform(0.35, 0.65) * size
    cx = rng.uniform(0.35, 0.65) * size
    ry = rng.uniform(0.16, 0.26) * size
    rx = rng.uniform(0.16, 0.26) * size
    theta = rng.uniform(0, np.pi)
    dy, dx = rr - cy, cc - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
    rho = np.hypot(u, v)
    ang = np.arctan2(v, u)
    amp = rng.uniform(0.1, 0.3) if malignant else rng.uniform(0.0, 0.08)
    textured = rng.random() < (0.7 if malignant else 0.15)
    k = int(rng.integers(5, 10))
    bound = 1.0 + amp * np.sin(k * ang + rng.uniform(0, 2 * np.pi)) \
        + 0.04 * np.sin(2 * ang + rng.uniform(0, 2 * np.pi))
    inside = rho < bound
    rim = np.clip(1.0 - np.abs(rho - bound) / 0.12, 0, 1)
    base = rng.uniform(0.08, 0.22) if malignant else rng.uniform(0.16, 0.30)
    interior = base + textured * (rng.uniform(1.5, 4.0) / 255.0) * rng.standard_normal((size, size))
    img = np.where(inside, interior, img)
    img = img + 0.14 * rim
    img = np.clip(img * rng.uniform(0.8, 1.2), 0, 1)
    rows, cols = np.nonzero(inside)
    if rows.size == 0:
        box = (int(cy), int(cx), int(cy) + 1, int(cx) + 1)
    else:
        box = (int(rows.min()), int(cols.min()), int(rows.max()) + 1, int(cols.max()) + 1)
    return np.round(img * 255).astype(np.uint8), box


def _spread(total: int, parts: int, rng: np.random.Generator, lo: int = 1, hi: int = 6) -> list[int]:
    if not parts * lo <= total <= parts * hi:
        raise ValueError(f"cannot spread {total} samples over {parts} patients with {lo}..{hi} each")
    counts = [lo] * parts
    for _ in range(total - parts * lo):
        open_ = [i for i, c in enumerate(counts) if c < hi]
        counts[open_[int(rng.integers(len(open_)))]] += 1
    return counts


def generate_synthetic(out_dir: str | Path, count: int, patients: int, malignant_fraction: float = 0.2,
                       size: int = 64, seed: int = 0, name: str = "synthetic",
                       patient_prefix: str = "P") -> DatasetManifest:
    """Write ``count`` synthetic nodule PGMs plus ``manifest.csv`` and ``boxes.json`` into ``out_dir``.

    Each synthetic patient holds 1-6 images of a single class.
    """
    if size < 32 or size % 2:
        raise ValueError(f"size must be even and >= 32, got {size}")
    if count < 1 or patients < 4 or patients > count:
        raise ValueError(f"need 4 <= patients <= count, got count={count} patients={patients}")
    rng = np.random.default_rng(seed)
    n_mal = int(round(count * malignant_fraction))
    p_mal = int(round(patients * malignant_fraction))
    p_mal = min(max(p_mal, 2, math.ceil(n_mal / 6)), n_mal, patients - 2)
    p_ben = patients - p_mal
    n_ben = count - n_mal
    if n_mal < 2 or n_ben < 2 * 1 or not p_ben <= n_ben <= 6 * p_ben:
        raise ValueError(f"infeasible synthetic composition count={count} patients={patients} "
                         f"malignant_fraction={malignant_fraction}")
    per_patient = [(0, c) for c in _spread(n_ben, p_ben, rng)] + [(1, c) for c in _spread(n_mal, p_mal, rng)]
    order = rng.permutation(len(per_patient))
    out = Path(out_dir)
    (out / "img").mkdir(parents=True, exist_ok=True)
    samples, boxes = [], {}
    k = 0
    for pnum, j in enumerate(order):
        label, n = per_patient[j]
        pid = f"{patient_prefix}{pnum:04d}"
        for _ in range(n):
            img, box = render_nodule(rng, size, bool(label))
            score = int(rng.integers(3, 6)) if label else int(rng.integers(1, 3))
            fname = f"{name}_{k:05d}.pgm"
            write_pgm(out / "img" / fname, img)
            boxes[fname] = box
            samples.append(Sample((out / "img" / fname).resolve(), pid, score))
            k += 1
    manifest = DatasetManifest(samples, name, boxes)
    write_manifest(out / "manifest.csv", manifest)
    (out / "boxes.json").write_text(json.dumps({k: list(v) for k, v in boxes.items()}, indent=0, sort_keys=True))
    return manifest
