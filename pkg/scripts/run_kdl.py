#!/usr/bin/env python3
"""KDL-EC-n vs the unaided student on D2, with a consult fitted on D1.

Writes report tables, per-repetition rows, per-epoch loss curves and a
sign-test summary of the convergence epochs to <work>/kdl_ec<n>/.
"""

from __future__ import annotations

import math
import sys
import time

import numpy as np

from _bench import Timer, datasets, dump, log, parser, setup
from fusecad.experiment import fit_consult_bundle, kdl_study
from fusecad.experts import load_consult, save_consult
from fusecad.inputs import prepare_views
from fusecad.metrics import emit_report, render_table


def sign_test(wins: int, losses: int) -> float:
    n = wins + losses
    return sum(math.comb(n, k) for k in range(wins, n + 1)) / 2 ** n if n else 1.0


def main(argv=None) -> int:
    ap = parser(__doc__.splitlines()[0])
    ap.add_argument("--consult-size", type=int, default=3)
    ap.add_argument("--cue-join", default="features", choices=("features", "probabilities"))
    args = ap.parse_args(argv)
    work, cfg, store = setup(args)
    d1, d2 = datasets(work)
    clock = Timer()
    bundle = work / f"consult_ec{args.consult_size}_seed{args.seed}"
    if (bundle / "consult.json").exists():
        ens = load_consult(bundle)
    else:
        ens = fit_consult_bundle(d1, prepare_views(d1, "fused", cfg.size), cfg, args.consult_size, store=store,
                                 log=log.info)
        save_consult(bundle, ens)
    log.info("consult ready after %s: %s", clock, [m.get("key") for m in ens.meta])
    reports = kdl_study(d2, prepare_views(d2, "fused", cfg.size), ens, cfg, args.cue_join, log=log.info)
    out = work / f"kdl_ec{args.consult_size}"
    emit_report(reports, out)
    k, u = ([r["convergence_epoch"] for r in rep.rows] for rep in reports)
    wins, losses = sum(a < b for a, b in zip(k, u)), sum(a > b for a, b in zip(k, u))
    summary = {"kdl_epochs": k, "unaided_epochs": u, "kdl_mean": float(np.mean(k)),
               "unaided_mean": float(np.mean(u)), "wins": wins, "losses": losses,
               "sign_test_p": sign_test(wins, losses), "seconds": round(time.time() - clock.t0)}
    dump(out / "convergence.json", summary)
    print(render_table(reports), end="")
    print(f"convergence: KDL {summary['kdl_mean']:.1f} vs unaided {summary['unaided_mean']:.1f}, "
          f"sign test {wins}-{losses} p={summary['sign_test_p']:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
