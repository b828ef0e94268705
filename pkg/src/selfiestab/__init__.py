"""Track-based selfie-video stabilization with rigid MLS warps."""

from .mls import (DEFAULT_CONFIG, DegenerateWarpError, MlsConfig, NodePair, build_grid,
                  grid_warp_point, mls_warp_point, mls_warp_points, resample_frame, warp_grid)
from .objective import LossBreakdown, background_loss, foreground_loss, total_loss
from .solvers import SolverReport, solve_direct
from .tracks import (FrameTracks, LambdaSchedule, SyntheticSceneSpec, TrackWindow, load_tracks,
                     synthesize_scene)

__version__ = "0.1.0"
