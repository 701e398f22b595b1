"""PASS/FAIL lines recorded by the acceptance suite, shown in the pytest summary."""

import functools
import time

LINES: list[str] = []


def criterion(number: int, title: str, limit_s: float):
    """Time the wrapped check against ``limit_s`` and record one result line.

    The check may return a short detail string for the report.
    """

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            t0 = time.perf_counter()
            try:
                detail = fn(*args, **kwargs)
            except Exception as e:
                elapsed = time.perf_counter() - t0
                _record(number, title, False, elapsed, limit_s, f"{type(e).__name__}: {e}")
                raise
            elapsed = time.perf_counter() - t0
            ok = elapsed <= limit_s
            _record(number, title, ok, elapsed, limit_s, detail or "")
            assert ok, f"criterion {number} took {elapsed:.1f} s, limit {limit_s:.0f} s"

        return run

    return wrap


def _record(number, title, ok, elapsed, limit_s, detail):
    detail = detail.splitlines()[0][:160] if detail else ""
    line = (f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title} "
            f"({elapsed:.2f} s / {limit_s:.0f} s)" + (f" {detail}" if detail else ""))
    LINES.append(line)
    print(line, flush=True)
