"""
Scoring a generated video
=========================

Pose accuracy is object keypoint similarity averaged over ten thresholds;
appearance is embedding similarity to the reference. The two combine into a
harmonic mean.
"""

import math

import numpy as np

from dancegen.metrics import harmonic_mean, map_from_table, oks
from dancegen.pose import DEFAULT_K, NUM_KEYPOINTS, OKSParams, PoseSkeleton, template_pose

gt = template_pose(center=(16, 16))
print("OKS of a pose with itself:", oks(gt, gt.copy()))

# One keypoint displaced by s*k*sqrt(2) scores exp(-1).
s, k = 4.0, DEFAULT_K[0]
a, b = np.zeros((NUM_KEYPOINTS, 3)), np.zeros((NUM_KEYPOINTS, 3))
a[0] = (10, 10, 2)
b[0] = (10 + s * k * math.sqrt(2), 10, 2)
print("single keypoint:", oks(PoseSkeleton(a), PoseSkeleton(b), OKSParams(object_scale_rule=s)), "vs", math.exp(-1))

#%%
# A constant OKS of 0.7 clears thresholds 0.50 .. 0.70 (five of ten).
print("mAP of a constant 0.7 table:", map_from_table(np.full((8, 2), 0.7)))
for shift in (0.5, 1.0, 2.0, 4.0):
    det = gt.copy()
    det.keypoints[:, 0] += shift
    print(f"shift {shift}px -> OKS {oks(gt, det):.3f}")
print("H(0.83, 0.91) =", round(harmonic_mean(0.83, 0.91), 2))
