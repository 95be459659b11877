"""Local time of Brownian motion at the origin from binned occupation times.

E l(1, 0) = sqrt(2/pi) for standard Brownian motion started at 0.

Run: python3 demos/local_time.py
"""

import math
import time

import numpy as np

from pcaf_lab import simulate as sim


if __name__ == "__main__":
    target = math.sqrt(2 / math.pi)
    print(f"target E l(1, 0) = {target:.5f}")
    for paths, dt, width in ((500, 1e-3, 0.05), (2000, 1e-3, 0.02), (2000, 1e-4, 0.02)):
        start = time.perf_counter()
        lt, defect = sim.local_time_at_zero(1.0, dt, paths, 11, width)
        se = np.std(lt, ddof=1) / math.sqrt(paths)
        print(f"  paths {paths:>5}, dt {dt:g}, bin {width:g}: {lt.mean():.5f} +- {se:.5f}"
              f"  (defect {defect.max():.1e}, {time.perf_counter() - start:.1f}s)")
