#!/usr/bin/env python3
"""Expert family x freeze fraction x input mode grid on D2 (one report per cell)."""

from __future__ import annotations

import sys

from _bench import Timer, datasets, log, parser, setup
from fusecad.experiment import grid_study
from fusecad.inputs import load_fusions, prepare_views
from fusecad.metrics import emit_report, render_table


def main(argv=None) -> int:
    ap = parser(__doc__.splitlines()[0])
    ap.add_argument("--modes", default="raw,augmented,fused")
    ap.add_argument("--freezes", default="0,0.25,0.5,0.75")
    args = ap.parse_args(argv)
    work, cfg, store = setup(args)
    _, d2 = datasets(work)
    clock = Timer()
    fus = load_fusions(d2)
    views = {m: prepare_views(d2, m, cfg.size, fus) for m in args.modes.split(",")}
    freezes = tuple(float(f) for f in args.freezes.split(","))
    reports = grid_study(d2, views, cfg, freezes, store, log=log.info)
    emit_report(reports, work / "grid")
    print(render_table(reports), end="")
    log.info("done in %s", clock)
    return 0


if __name__ == "__main__":
    sys.exit(main())
