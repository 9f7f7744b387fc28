"""Camera trajectory (masked bundle adjustment) and global human trajectory."""
from .dba import (BAProblem, DBAConfig, DBAResult, FrameMask, KeyframeSelector, apply_masks, dba_objective,
                  information_scores, interpolate_poses, keyframe_scale, select_keyframes, solve_masked_ba)

__all__ = [
    "BAProblem", "DBAConfig", "DBAResult", "FrameMask", "KeyframeSelector", "apply_masks", "dba_objective",
    "information_scores", "interpolate_poses", "keyframe_scale", "select_keyframes", "solve_masked_ba",
]
