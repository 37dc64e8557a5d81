#!/usr/bin/env python3
"""Single experts and EC-3/5/7 consults on the same repeated D2 splits."""

from __future__ import annotations

import sys

from _bench import Timer, datasets, log, parser, setup
from fusecad.experiment import consult_study
from fusecad.inputs import prepare_views
from fusecad.metrics import emit_report, render_table


def main(argv=None) -> int:
    ap = parser(__doc__.splitlines()[0])
    ap.add_argument("--sizes", default="3,5,7")
    ap.add_argument("--freeze-fraction", type=float, default=0.0)
    args = ap.parse_args(argv)
    work, cfg, store = setup(args)
    _, d2 = datasets(work)
    clock = Timer()
    sizes = tuple(int(s) for s in args.sizes.split(","))
    reports = consult_study(d2, prepare_views(d2, "fused", cfg.size), cfg, sizes, args.freeze_fraction, store,
                            log=log.info)
    emit_report(reports, work / "consult")
    print(render_table(reports), end="")
    log.info("done in %s", clock)
    return 0


if __name__ == "__main__":
    sys.exit(main())
