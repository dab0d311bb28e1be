"""The two synthetic domains: bright plain backgrounds with upright hands
(source) against dim textured scenes, wider rotations and occluders (target)."""
import numpy as np

from handadapt import evalkit as ev
from handadapt import synthhands as sh

src = sh.build_dataset(sh.source_domain(), 300)
tgt = sh.build_dataset(sh.target_domain(), 300)

for name, ds in (("source", src), ("target", tgt)):
    img = ds.images.astype(np.float64)
    hand = ds.masks.astype(bool)
    fg = np.mean([img[i][hand[i]].mean() for i in range(len(ds))])
    bg = np.mean([img[i][~hand[i]].mean() for i in range(len(ds))])
    wm = ev.bone_lengths(ds.keypoints, "wrist_mcp")
    print(f"{name:6s} mean pixel {img.mean():.3f}  hand {fg:.3f}  background {bg:.3f}  "
          f"mask cover {hand.mean():.3f}  wrist-MCP length {wm.mean():.2f} +- {wm.std():.2f} px")

# a crude text rendering of one target mask
m = tgt.masks[0]
for row in m[::2]:
    print("".join("#" if v else "." for v in row[::1]))
