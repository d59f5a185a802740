"""Fixed layout of the two-arm workcell shared by the allocator and the simulator."""

import numpy as np

ARM_NAMES = ("left", "right")
ARM_BASES = np.array([[-0.50, 0.40, 0.40], [0.50, 0.40, 0.40]])
ARM_HOMES = np.array([[-0.36, 0.32, 0.34], [0.36, 0.32, 0.34]])
REACH = 0.9
V_MAX = 0.5
