"""Outcome of each acceptance criterion, printed at the end of the session."""

import functools

RESULTS = {}


def record(number: int, ok: bool, detail: str):
    RESULTS[number] = (ok, detail)
    print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}", flush=True)
    assert ok, f"criterion {number}: {detail}"


def criterion(number: int):
    """Records a FAIL line when the decorated test raises before reporting."""

    def wrap(fn):
        @functools.wraps(fn)
        def run(*args, **kwargs):
            try:
                return fn(*args, **kwargs)
            except Exception as e:
                if number not in RESULTS:
                    RESULTS[number] = (False, f"{type(e).__name__}: {e}"[:300])
                raise

        return run

    return wrap
