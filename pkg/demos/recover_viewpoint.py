"""Recover the camera viewpoint of a rendered car by gradient descent.

Renders the procedural car from a random viewpoint, then searches for the
viewpoint that reproduces the image with multi-start projected gradient
descent on the sphere.  Also writes the target and the recovered view as
PPM files so the two can be compared by eye.

    python demos/recover_viewpoint.py --res 32 --trials 5
"""

import argparse
import math
import time
from pathlib import Path

import numpy as np

from voxelview import renderer
from voxelview.estimator import estimate_by_optimization
from voxelview.geometry import sample_band, vector_to_euler, viewpoint_error
from voxelview.volume import make_test_object


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--res", type=int, default=32)
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--starts", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out-dir", default="demo_out")
    args = p.parse_args()

    car = make_test_object("car", args.res)
    camera = renderer.CameraModel()
    out = Path(args.out_dir)
    out.mkdir(exist_ok=True)
    for i, v0 in enumerate(sample_band(np.random.default_rng(args.seed), args.trials)):
        target = renderer.render_view(car, v0, camera)
        t = time.perf_counter()
        v, loss = estimate_by_optimization(target, car, camera, args.starts)
        secs = time.perf_counter() - t
        a0, e0 = np.degrees(vector_to_euler(v0))
        a, e = np.degrees(vector_to_euler(v))
        err = math.degrees(viewpoint_error(v, v0))
        print(f"target az {a0:6.1f} el {e0:5.1f}  ->  found az {a:6.1f} el {e:5.1f}  "
              f"error {err:5.2f} deg  loss {loss:.2e}  {secs:.1f} s")
        renderer.write_ppm(out / f"target_{i}.ppm", target)
        renderer.write_ppm(out / f"found_{i}.ppm", renderer.render_view(car, v, camera))
    print(f"images in {out}/")


if __name__ == "__main__":
    main()
