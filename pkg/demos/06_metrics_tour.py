"""Tour of the evaluation metrics on instances small enough to verify by hand.

Vessel segmentation is scored with threshold-free voxel ranking metrics (average
precision and max-F1 over all distinct thresholds) plus centerline Dice, which
skeletonizes both masks and rewards topological agreement rather than bulk
overlap. Brain segmentation uses plain DSC.
"""

import numpy as np

from jobvs import average_precision, cl_dice, dsc, max_f1, skeletonize3d

# -- ranking metrics on a 4-voxel example you can check by hand ----------------
gt = np.array([1, 0, 1, 0])
prob = np.array([0.9, 0.8, 0.7, 0.1])
print("gt   :", gt.tolist())
print("prob :", prob.tolist())
print(f"average precision: {average_precision(prob, gt):.4f}   (= (1/1 + 2/3) / 2)")
f1, thr = max_f1(prob, gt)
print(f"max F1           : {f1:.4f} at threshold {thr}")
print(f"DSC at that cut  : {dsc(prob >= thr, gt):.4f}   (identical by construction)")

# both are invariant to any strictly monotone rescaling of the probabilities
print("AP after prob**3 :", average_precision(prob**3, gt))

# -- centerline Dice -----------------------------------------------------------
# pred covers half of a long thin vessel: bulk DSC punishes it less than clDice
pred = np.zeros((3, 3, 9), dtype=np.uint8)
gt3 = np.zeros_like(pred)
gt3[1, 1, 0:8] = 1
pred[1, 1, 0:4] = 1
print("\nthin vessel, half covered:")
print(f"  DSC    = {dsc(pred, gt3):.4f}")
print(f"  clDice = {cl_dice(pred, gt3):.4f}   (= 2*1*0.5/1.5)")

# -- skeletonization -----------------------------------------------------------
z, y, x = np.ogrid[:9, :9, :9]
ball = ((z - 4) ** 2 + (y - 4) ** 2 + (x - 4) ** 2 <= 12).astype(np.uint8)
skel = skeletonize3d(ball)
print(f"\nsolid ball: {int(ball.sum())} voxels -> skeleton {int(skel.sum())} voxels (subset: "
      f"{not (skel.astype(bool) & ~ball.astype(bool)).any()})")

line = np.zeros((7, 7, 7), dtype=np.uint8)
line[3, 3, 1:6] = 1
print("1-voxel line is already its own skeleton:", np.array_equal(skeletonize3d(line), line))

# a thin tube thins to (close to) its centerline
tube = np.zeros((7, 7, 15), dtype=np.uint8)
zz, yy, xx = np.mgrid[:7, :7, :15]
tube[(zz - 3) ** 2 + (yy - 3) ** 2 <= 2.5] = 1
skel_tube = skeletonize3d(tube)
print(f"tube {int(tube.sum())} voxels -> skeleton {int(skel_tube.sum())} voxels")
print("tube skeleton slice (z=3):")
for row in skel_tube[3]:
    print("   " + "".join(".#"[v] for v in row))
