"""PASS/FAIL ledger for the acceptance suite; conftest prints it in the terminal summary."""

from __future__ import annotations

import time

LINES: list[str] = []


def record(number: int, title: str, ok: bool, detail: str, started: float | None = None) -> bool:
    took = f" [{time.time() - started:.0f}s]" if started is not None else ""
    line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}: {detail}{took}"
    LINES.append(line)
    print(line, flush=True)
    return ok
