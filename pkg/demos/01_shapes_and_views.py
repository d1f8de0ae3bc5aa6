"""Procedural shapes and what a single camera sees of them.

Every class is a parametric primitive; instances vary its integer
parameters.  A view keeps only the voxels hit first by the camera rays,
so the back and the inside of the shape are missing.
"""
import numpy as np

from voxsem.voxeldata import CLASS_NAMES, generate_shape, jaccard, render_single_view


def show_slice(grid, z):
    # one horizontal slice, '#' for occupied cells
    return "\n".join("".join("#" if v else "." for v in row) for row in grid[:, :, z])


for c, name in enumerate(CLASS_NAMES):
    a, b = generate_shape(c, 0), generate_shape(c, 1)
    print(f"{name:<10} voxels {int(a.sum()):4d}  Jaccard(instance 0, instance 1) = {jaccard(a, b):.3f}")

chair = generate_shape(CLASS_NAMES.index("chair"), 0)
print("\nchair, slice z = 4:")
print(show_slice(chair, 4))

# the same chair seen from the 12 viewpoints around it
for v in range(0, 12, 3):
    view = render_single_view(chair, v)
    print(f"view {v:2d}: {int(view.sum())} visible voxels of {int(chair.sum())}, "
          f"all inside the shape: {bool(np.all(chair[view.astype(bool)]))}")
