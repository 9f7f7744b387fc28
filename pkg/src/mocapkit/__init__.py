"""Post-processing toolkit for markerless whole-body motion capture."""
from .camera import backproject, project_perspective
from .model import (BodyShape, CameraState, KeypointFrame2D, KeypointFrame3D, MotionSequence,
                    WholeBodyPose)
from .skeleton import Skeleton, default_skeleton, forward_kinematics, load_skeleton
from .io import SequenceArchive, read_archive, write_archive
from .pipeline import evaluate_trajectories, run_pipeline

__version__ = "0.1.0"
