"""Two ways a viewpoint benchmark can flatter a weak predictor.

1. Dataset bias: when most ground-truth azimuths fall in one bin, always
   answering the mean viewpoint scores well on accuracy@30 but poorly on
   distribution-aware accuracy (DVA), which averages per-bin accuracy.
2. Alignment: a free linear map fitted between predictions and ground
   truth can zero its weights and put the common view in its bias, so
   predictions that carry no information still score well.  A
   rotation-only (Procrustes) fit cannot collapse them.

    python demos/bias_and_alignment.py
"""

import numpy as np

from voxelview.evalkit import compute_metrics, constant_predictor, linear_align, procrustes_align
from voxelview.geometry import euler_to_vector


def views(az_deg, el_deg=0.0):
    return np.array([euler_to_vector(np.radians(a), np.radians(el_deg)) for a in az_deg])


def show(name, report):
    print(f"  {name:<28} acc@30 {report.accuracy_at_30:.3f}  median {report.median_error_deg:6.1f} deg  "
          f"DVA {report.dva:.3f}  CI {report.confidence_index:.3f}")


def main():
    rng = np.random.default_rng(0)
    n = 2000
    inside = rng.random(n) < 0.9
    biased = views(np.where(inside, rng.uniform(0, 30, n), rng.uniform(30, 360, n)))
    uniform = views(rng.uniform(0, 360, n))

    print("constant predictor (mean of 100 calibration viewpoints):")
    for name, gts in (("90% in one 30 deg bin", biased), ("uniform azimuth", uniform)):
        c = constant_predictor(gts[:100])
        show(name, compute_metrics(np.tile(c, (n - 100, 1)), gts[100:]))

    print("uninformative predictions (random directions) against views within 60 deg of a common one:")
    gts = views(rng.uniform(-60, 60, 5000), 10.0)
    noise = rng.normal(size=(5000, 3))
    preds = noise / np.linalg.norm(noise, axis=1, keepdims=True)
    rot = procrustes_align(preds, gts)
    lin = linear_align(preds, gts)
    show("procrustes alignment", compute_metrics(preds, gts, rot))
    show("linear alignment", compute_metrics(preds, gts, lin))
    print(f"  linear weight operator norm {np.linalg.norm(lin.weights, 2):.4f}: "
          "the fit ignores the predictions and answers the common view")

if __name__ == "__main__":
    main()
