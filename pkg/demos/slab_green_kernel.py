"""
Green function of a slab
========================

Brownian motion killed on leaving {|x1| < L}.  The kernel is an
alternating image series; its integral against f = 1 must give the mean
exit time L^2 - x1^2.
"""
import numpy as np

from rediff.greenslab import (SeparableBump, SlabKernel, green_apply, green_by_time_integral,
                              green_function, green_gradient)

kern = SlabKernel(1.0, 3)
x = np.array([0.2, 0.0, 0.0])
y = np.array([-0.3, 0.4, 0.0])

# %%
# Image series against a direct time integral of the killed heat kernel.
print("image series :", green_function(kern, x, y))
print("time integral:", green_by_time_integral(kern, x, y))

# %%
# The kernel vanishes on the faces and decays exponentially across the slab.
for r in (0.5, 1.0, 2.0, 4.0):
    print(f"|y_perp| = {r:3.1f}: g = {green_function(kern, x, [0.0, r, 0.0]):.3e}")
print("on the face:", green_function(kern, [1.0, 0.3, 0.0], y))

# %%
# Mean exit time by polar quadrature.
for x1 in (0.0, 0.5, 0.9):
    v = green_apply(kern, lambda p: np.ones(len(p)), np.array([x1, 0.0, 0.0]))
    print(f"x1 = {x1}: G1 = {v.value:.6f}, exact {1 - x1 * x1:.6f}")

# %%
# Separable test functions have Green images in closed form, with gradients.
sep = SeparableBump(2.0, [1.0, 0.3], 0.6, d=3)
z = np.array([0.3, 0.2, -0.1])
print("closed form:", sep.green(z), " quadrature:", green_apply(SlabKernel(2.0, 3), sep, z).value)
print("gradient   :", sep.green_grad(z))
print("kernel gradient at x:", green_gradient(kern, x, y))
