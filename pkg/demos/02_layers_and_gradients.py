"""
Layer primitives and finite-difference verification
===================================================

Every layer ships an analytic backward pass. This walks the forward
semantics of the main primitives and then runs the full 64-bit
finite-difference suite that guards them.
"""
import numpy as np

from uception import ConvSpec, conv3d, maxpool3d, sigmoid, upsample_nearest
from uception.gradcheck import format_results, run_suite

# cross-correlation with a 1-cube identity kernel is the identity map
x = np.random.default_rng(0).standard_normal((1, 1, 4, 4, 4)).astype(np.float32)
spec = ConvSpec(in_channels=1, out_channels=1, kernel=(1, 1, 1))
y = conv3d(x, np.ones((1, 1, 1, 1, 1), np.float32), [0.0], spec)
print("identity kernel reproduces input:", np.array_equal(y, x))

# an all-ones 3-cube kernel over an all-ones 3-cube sums 27 voxels
spec = ConvSpec(1, 1, (3, 3, 3), padding="valid")
y = conv3d(np.ones((1, 1, 3, 3, 3)), np.ones((1, 1, 3, 3, 3)), [0.0], spec)
print("all-ones valid conv:", y.ravel())

# pooling halves extents and keeps block maxima; upsampling inverts it
pooled, _ = maxpool3d(np.arange(64.0).reshape(1, 1, 4, 4, 4))
print("pooled shape:", pooled.shape, "max:", pooled.max())
print("sigmoid(0) =", sigmoid(np.zeros(1))[0])
up = upsample_nearest(pooled)
print("upsampled back to:", up.shape)

# the full gradient suite: primitives, both blocks, miniature networks
print("\nrunning the finite-difference suite (64-bit)...")
results = run_suite()
print(format_results(results), end="")
print("all passed:", all(r.passed for r in results))
