"""Turn manifests into network-ready arrays for a given input mode."""

from __future__ import annotations

import hashlib
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .dataio import DatasetManifest
from .features import FusionObject, downsample, featurize, mode_views, read_pgm
from .tensor import load_tensors, save_tensors

CACHE_ENV = "FUSECAD_CACHE"


def fusion_for(path: Path, cache_dir: str | Path | None = None) -> FusionObject:
    """Featurize one image, going through the FCT1 cache when a cache directory is set."""
    cache_dir = cache_dir or os.environ.get(CACHE_ENV)
    raw = Path(path).read_bytes()
    if cache_dir:
        key = hashlib.sha256(raw).hexdigest()[:32]
        f = Path(cache_dir) / f"{key}.fct"
        if f.exists():
            t = load_tensors(f)
            pad = t["padding"].astype(int)
            return FusionObject(t["fusion"], (int(pad[0]), int(pad[1])))
    fo = featurize(read_pgm(path))
    if cache_dir:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_tensors(f, {"fusion": fo.data, "padding": np.array(fo.padding, dtype=np.float64)})
    return fo


@dataclass
class Views:
    """Network inputs for one manifest under one input mode.

    ``x`` has shape (m, 3, size, size); ``sample`` maps each row back to its
    manifest index (m > n only in augmented mode).
    """

    x: np.ndarray
    labels: np.ndarray
    sample: np.ndarray
    mode: str

    def rows_for(self, sample_idx) -> np.ndarray:
        want = np.zeros(self.sample.max() + 1 if len(self.sample) else 0, dtype=bool)
        want[np.asarray(sample_idx, dtype=np.int64)] = True
        return np.nonzero(want[self.sample])[0]


def prepare_views(manifest: DatasetManifest, mode: str = "fused", size: int | None = None,
                  fusions: list[FusionObject] | None = None, cache_dir=None) -> Views:
    if fusions is None:
        fusions = [fusion_for(s.image_path, cache_dir) for s in manifest.samples]
    xs, labels, owner = [], [], []
    for i, (s, fo) in enumerate(zip(manifest.samples, fusions)):
        for v in mode_views(fo, mode):
            if size is not None:
                v = downsample(v.transpose(1, 2, 0), size).transpose(2, 0, 1)
            xs.append(v)
            labels.append(s.label)
            owner.append(i)
    return Views(np.stack(xs), np.array(labels, dtype=np.int64), np.array(owner, dtype=np.int64), mode)


def load_fusions(manifest: DatasetManifest, cache_dir=None) -> list[FusionObject]:
    return [fusion_for(s.image_path, cache_dir) for s in manifest.samples]
