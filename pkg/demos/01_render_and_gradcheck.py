"""
Rendering a cloud and checking its gradients
============================================

A handful of anisotropic Gaussians is splatted into a 48x48 image, then the
analytic backward pass is compared against central differences for every
parameter, camera included.
"""

import math
from pathlib import Path

import numpy as np
from PIL import Image

from splatfit import geometry as geo
from splatfit import synth
from splatfit.grad import gradcheck
from splatfit.render import rasterize

out_dir = Path(__file__).parent / "out"
out_dir.mkdir(exist_ok=True)

# A seeded cloud with view-dependent colour, and one camera looking at it.
cloud = synth.make_synthetic_cloud(12, seed=3, sh_degree=1)
cam = geo.Camera.look_at([1.5, 0.4, 0.6], [0.0, 0.0, 0.0], math.radians(55), 48, 48)

out = rasterize(cloud, cam)
print(f"{len(out.order)} of {len(cloud)} Gaussians in front of the camera")
print(f"covered pixels (alpha > 0.5): {(out.alpha > 0.5).mean():.0%}")
Image.fromarray(synth.to_uint8(out.rgb)).resize((192, 192), Image.NEAREST).save(out_dir / "render.png")

# Who contributes to the centre pixel, front to back?
for rec in out.contributors(24, 24):
    print(f"  gaussian {rec['gaussian']:2d}  alpha {rec['alpha']:.3f}  T {rec['transmittance']:.3f}")

# Gradient check against a fixed random linear functional of the image.
rng = np.random.default_rng(0)
w = rng.uniform(-1, 1, size=(48, 48, 3))


def loss(rgb, alpha):
    return float(np.sum(w * rgb)), w


report = gradcheck(cloud, cam, loss)
print("\nparameter       max rel err   checked  skipped")
for name, err in report.max_rel_error.items():
    print(f"{name:14s}  {err:11.2e}   {report.n_checked[name]:7d}  {report.n_skipped[name]:7d}")
print("passed:", report.passed)
