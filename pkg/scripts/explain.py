#!/usr/bin/env python3
"""Grad-CAM overlays for a trained KDL checkpoint on D2, plus the in-box heatmap mass.

Expects a checkpoint written by ``fusecad experiment kdl`` (for example
``<out>/checkpoints/rep00_KDL-EC-3``).
"""

from __future__ import annotations

import sys
from pathlib import Path

import numpy as np

from _bench import datasets, dump, parser, setup
from fusecad.features import read_pgm
from fusecad.gradcam import box_mass, gradcam, overlay
from fusecad.inputs import prepare_views
from fusecad.kdl import load_kdl


def main(argv=None) -> int:
    ap = parser(__doc__.splitlines()[0])
    ap.add_argument("checkpoint")
    ap.add_argument("--count", type=int, default=60)
    ap.add_argument("--overlays", type=int, default=8, help="how many PPM overlays to write")
    args = ap.parse_args(argv)
    work, cfg, _ = setup(args)
    _, d2 = datasets(work)
    model = load_kdl(args.checkpoint)
    views = prepare_views(d2, "fused", cfg.size)
    out = work / "explain"
    out.mkdir(parents=True, exist_ok=True)
    idx = np.random.default_rng(args.seed).permutation(len(d2))[:args.count]
    masses, areas = [], []
    for j, i in enumerate(idx):
        s = d2.samples[i]
        heat = gradcam(model, views.x[i])
        inside, area = box_mass(heat, d2.box(s))
        masses.append(inside)
        areas.append(area)
        if j < args.overlays:
            overlay(read_pgm(s.image_path), heat, path=out / f"{Path(s.image_path).stem}.ppm")
    stats = {"images": len(idx), "mean_in_box_mass": float(np.mean(masses)), "mean_box_area": float(np.mean(areas))}
    dump(out / "box_mass.json", stats)
    print(f"{stats['images']} images: in-box mass {stats['mean_in_box_mass']:.3f} "
          f"vs box area {stats['mean_box_area']:.3f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
