"""Populate .study_cache with the frames the acceptance suite consumes.

Running this ahead of pytest keeps the heavy Monte Carlo studies out of
the test process; the suite recomputes any study whose cache is missing
or whose parameters changed, so this script is an optimization, not a
requirement.
"""

import json
import sys
import time

from selmix.simharness import (
    ACCEPTANCE_STUDIES,
    cached_study,
    summarize_am52,
    summarize_lmm,
)

ORDER = ("am52_sigma1", "lmm_gwork", "lmm_power_lowsig", "lmm_main")


def log(msg):
    print(f"[{time.strftime('%H:%M:%S')}] {msg}", flush=True)


def main():
    refresh = "--refresh" in sys.argv
    for name in ORDER:
        runner, params = ACCEPTANCE_STUDIES[name]
        t0 = time.time()
        log(f"study {name}: starting")

        def progress(rep, n_signal, noise_done, _name=name, _t0=t0):
            log(f"study {_name}: rep {rep}, signal {n_signal}, "
                f"noise {noise_done} ({time.time() - _t0:.0f}s)")

        extra = {"progress": progress} if "arms" in params else {}
        df = cached_study(name, runner, params, refresh=refresh, **extra)
        summary = (summarize_lmm(df) if "arms" in params
                   else summarize_am52(df))
        log(f"study {name}: {len(df)} rows in {time.time() - t0:.0f}s")
        log(json.dumps(summary, indent=1, default=float))


if __name__ == "__main__":
    main()
