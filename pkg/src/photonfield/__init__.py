"""Neural photon fields for volumetric global illumination, CPU edition."""

import os

# numba's TBB layer warns on older TBB installs; workqueue is always available
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
