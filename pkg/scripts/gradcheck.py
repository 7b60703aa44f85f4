# scripts/gradcheck.py
import sys
import time

import numpy as np

from udgs_slam.geometry import CameraIntrinsics
from udgs_slam.gradcheck import check_gradients, random_scene

# --- Configuration ---
N_SCENES = 100
MAX_SPLATS = 10
IMAGE_SIZE = 16
SEED = 0


def main() -> int:
    """Finite-difference check of render_backward over random small scenes."""
    K = CameraIntrinsics(fx=16.0, fy=16.0, cx=IMAGE_SIZE / 2, cy=IMAGE_SIZE / 2,
                         width=IMAGE_SIZE, height=IMAGE_SIZE)
    rng = np.random.default_rng(SEED)
    start = time.perf_counter()
    failures = []
    worst = {}
    for i in range(N_SCENES):
        gmap, pose = random_scene(rng, int(rng.integers(1, MAX_SPLATS + 1)), K)
        for report in check_gradients(gmap, pose, K, rng):
            worst[report.name] = max(worst.get(report.name, 0.0), report.max_rel_error)
            if not report.passed:
                failures.append((i, report))
        if (i + 1) % 10 == 0:
            print(f"Checked {i + 1} of {N_SCENES} scenes...")

    print("-" * 50)
    for name, rel in worst.items():
        print(f"{name:>14}: worst relative error {rel:.3e}")
    print(f"Elapsed: {time.perf_counter() - start:.1f} s")
    if failures:
        for i, report in failures:
            print(f"Scene {i}: {report.name} failed (abs {report.max_abs_error:.3e})")
        print(f"{len(failures)} gradient checks failed.")
        return 1
    print("All gradient checks passed.")
    return 0


if __name__ == "__main__":
    sys.exit(main())
