"""Cooperation under a moving hand: the finger bends 18 degrees, then the hand lifts 74 mm.

No classifier is needed; the run starts in cooperation mode.

    python3 demos/disturbance_tracking.py
"""
import numpy as np

from hoiassist import scenario as sc

script = sc.disturbance_script()
run = sc.run_scenario(script)
print(run.report.summary(script.thresholds), end="")

rows = run.targets
err_mm = np.array([r[4] for r in rows])
err_deg = np.array([r[5] for r in rows])
times = np.array([r[1] for r in rows])
print("\n  time   err mm  err deg")
for t in np.arange(np.ceil(times[0]), times[-1], 3.0):
    k = int(np.searchsorted(times, t))
    print(f"{times[k]:6.1f}  {err_mm[k]:7.3f}  {err_deg[k]:7.3f}")
