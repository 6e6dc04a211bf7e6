"""Synthetic ground truth, flow files, and color-wheel rendering.

Generates one homography pair, writes its ground-truth field as .flo and as
a KITTI-style 16-bit PNG, reads both back, and renders the color wheel.
East is red, north is violet, zero flow is white; saturation encodes
magnitude.

Run:  python3 demos/03_flow_files_and_color.py        (instant)
"""

import pathlib
import tempfile

import numpy as np

from warpflow.flow_io import (read_flo, read_kitti_png, save_color_png,
                              write_flo, write_kitti_png)
from warpflow.synth import gen_pair

sample = gen_pair(seed=7, kind="homography", max_disp=8.0, size=(64, 64))
flow = sample.gt_flow
u, v = flow.data.data[0, 0], flow.data.data[0, 1]
print(f"u range [{u.min():.2f}, {u.max():.2f}], "
      f"v range [{v.min():.2f}, {v.max():.2f}], "
      f"{sample.valid.mean():.0%} of pixels valid")

out = pathlib.Path(tempfile.mkdtemp())
write_flo(out / "gt.flo", flow)
write_kitti_png(out / "gt.png", flow)

# the container stores float32; compare against the same precision
back = read_flo(out / "gt.flo")
print("flo round trip bitwise equal:",
      np.array_equal(back.data.data, flow.data.data.astype(np.float32)))

approx, valid = read_kitti_png(out / "gt.png")
err = np.abs(approx.data.data - flow.data.data).max()
print(f"kitti png worst quantization error: {err:.6f} px (bound 1/128)")

save_color_png(out / "wheel.png", flow)
print("color rendering written to", out / "wheel.png")
