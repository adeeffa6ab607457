"""
Segmentation metrics and report format
======================================

Hand-checkable cases for the three evaluation metrics and the per-volume
record plus mean/std summary they are reported in.
"""
import numpy as np

from uception import average_hausdorff, evaluate_masks, hard_dice, sensitivity, soft_dice
from uception.metrics import summarize_reports

# soft Dice on probabilities: P = (0.5, 0.5) against T = (1, 0) scores 0.5
print("soft dice [(0.5, 0.5) vs (1, 0)] =",
      soft_dice(np.array([0.5, 0.5]), np.array([1.0, 0.0])))

# confusion-count arithmetic: prediction covers the truth plus an
# equal-sized spurious region -> dice 2/3, sensitivity 1
truth = np.zeros((4, 4, 4), bool)
truth[0] = True
pred = truth.copy()
pred[1] = True
print("dice (cover + equal extra) =", round(hard_dice(pred, truth), 4))
print("sensitivity                =", sensitivity(pred, truth))

# average Hausdorff distance in physical millimetres: two single-voxel
# masks three voxels apart at 1 mm spacing are 3 mm apart
a = np.zeros((8, 8, 8), bool)
b = np.zeros((8, 8, 8), bool)
a[0, 0, 0] = True
b[0, 0, 3] = True
print("avg Hausdorff (single pair) =", average_hausdorff(a, b, (1, 1, 1)), "mm")

# the same quantity from the brute-force route, exact agreement
print("brute-force route           =",
      average_hausdorff(a, b, (1, 1, 1), method="brute"), "mm")

# per-volume records plus the summary table: rows are Dice, Sensitivity,
# Avg. Hausdorff, each as mean then std
reports = [evaluate_masks(pred, truth, (1, 1, 1), name=f"vol{i}") for i in range(3)]
print("\n" + reports[0].to_record())
print(summarize_reports(reports), end="")
