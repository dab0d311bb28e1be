"""Keypoints go in as Gaussian heatmaps on a 16x16 grid and come back out
through a sharpened soft-argmax. The same geometric warp has to act on
images, heatmaps, masks and coordinates, and the two routes through it should
agree."""
import numpy as np

from handadapt import augment as au
from handadapt import nethead as nh
from handadapt import synthhands as sh

arch = nh.ArchConfig()
ds = sh.build_dataset(sh.source_domain(), 4)
kp = ds.keypoints[0]

heat, inside = nh.encode_heatmaps(kp, arch.sigma)
back, ok = nh.decode_keypoints(heat, arch.temperature)
err = np.linalg.norm(back - kp, axis=-1)
print(f"round trip over {inside.sum()} in-frame joints: mean {err[inside].mean():.3f} px, max {err[inside].max():.3f} px")

rng = np.random.default_rng(1)
pair = au.sample_aug(rng, "strong")
print("sampled strong augmentation:", pair.geometric)

# warp the heatmap then decode, or decode then move the points
lhs, _ = nh.decode_keypoints(au.apply_spatial(pair, heat, 32), arch.temperature)
rhs, flags = au.apply_keypoints(pair, back)
gap = np.linalg.norm(lhs - rhs, axis=-1)[flags]
print(f"decode(warp(heat)) vs warp(decode(heat)): max {gap.max():.3f} px on {flags.sum()} joints")

img = au.apply_image(pair, ds.images[0].astype(np.float64))
mask = au.apply_spatial(pair, ds.masks[0].astype(np.float64), binary=True)
print("augmented image range", img.min().round(3), img.max().round(3), "| mask pixels", int(mask.sum()))

rot = au.AugPair(geometric=au.Geometric(rotation_deg=90.0))
lhs, _ = nh.decode_keypoints(au.apply_spatial(rot, heat, 32), arch.temperature)
rhs, _ = au.apply_keypoints(rot, back)
print("quarter turn disagreement:", float(np.abs(lhs - rhs).max()))
