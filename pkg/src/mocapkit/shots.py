"""Shot detection: content cuts, bounding-box tracking and flow-based cuts.

A frame index ``t`` reported as a cut means frames ``t-1`` and ``t`` belong
to different shots; the new shot starts at ``t``.
"""
import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

logger = logging.getLogger(__name__)

CUT_REASONS = ("content", "position", "flow", "end")


@dataclass(frozen=True)
class FrameSignature:
    histogram: np.ndarray
    frame_index: int

    def __post_init__(self):
        h = np.asarray(self.histogram, dtype=float)
        if h.ndim != 1 or np.any(h < 0) or abs(h.sum() - 1.0) > 1e-9:
            raise ValidationError("histogram must be non-negative and sum to 1")
        object.__setattr__(self, "histogram", h)


def frame_signature(image, frame_index, bins=16):
    """Per-channel intensity histogram of an (H, W) or (H, W, C) uint8/float image, normalized to 1."""
    img = np.asarray(image)
    if img.ndim == 2:
        img = img[..., None]
    hists = [np.histogram(img[..., c], bins=bins, range=(0, 256))[0] for c in range(img.shape[-1])]
    h = np.concatenate(hists).astype(float)
    return FrameSignature(h / h.sum(), frame_index)


def detect_content_shots(signatures, threshold):
    """Frames whose histogram differs from the previous frame by more than ``threshold`` (L1)."""
    if not threshold > 0:
        raise ValidationError("content threshold must be positive")
    sigs = sorted(signatures, key=lambda s: s.frame_index)
    cuts = []
    for prev, cur in zip(sigs, sigs[1:]):
        if np.abs(cur.histogram - prev.histogram).sum() > threshold:
            cuts.append(int(cur.frame_index))
    return cuts


@dataclass(frozen=True)
class BBox:
    center: np.ndarray
    size: np.ndarray
    frame_index: int
    track_id: int = None

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float)
        s = np.asarray(self.size, dtype=float)
        if c.shape != (2,) or s.shape != (2,):
            raise ValidationError("bbox center and size must be 2-vectors")
        if not (s[0] > 0 and s[1] > 0):
            raise ValidationError("bbox width and height must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "size", s)

    @property
    def diagonal(self):
        return float(np.hypot(*self.size))

    @property
    def area(self):
        return float(self.size[0] * self.size[1])

    def corners(self):
        half = self.size / 2
        return self.center - half, self.center + half

    def with_track(self, track_id):
        return BBox(self.center, self.size, self.frame_index, track_id)


class _Track:
    """Constant-velocity Kalman filter on (cx, cy, w, h)."""

    F = np.block([[np.eye(4), np.eye(4)], [np.zeros((4, 4)), np.eye(4)]])
    H = np.hstack([np.eye(4), np.zeros((4, 4))])

    def __init__(self, track_id, box, process_noise, measurement_noise):
        self.track_id = track_id
        self.x = np.concatenate([box.center, box.size, np.zeros(4)])
        self.P = np.diag([measurement_noise] * 4 + [1e4] * 4)
        q = process_noise
        self.Q = q * np.block([[np.eye(4) / 4, np.eye(4) / 2], [np.eye(4) / 2, np.eye(4)]])
        self.R = measurement_noise * np.eye(4)
        self.misses = 0

    def predict(self):
        self.x = self.F @ self.x
        self.P = self.F @ self.P @ self.F.T + self.Q
        return self.x[:4]

    def update(self, box):
        z = np.concatenate([box.center, box.size])
        s = self.H @ self.P @ self.H.T + self.R
        gain = self.P @ self.H.T @ np.linalg.inv(s)
        self.x = self.x + gain @ (z - self.H @ self.x)
        self.P = (np.eye(8) - gain @ self.H) @ self.P
        self.misses = 0


def track_subjects(detections, process_noise=1.0, measurement_noise=4.0, gate_distance=None,
                   gate_scale=0.5, max_age=1):
    """Assign track ids to per-frame detections.

    Args:
        detections: list over frames of lists of BBox.
        process_noise, measurement_noise: Kalman noise intensities (px^2).
        gate_distance: absolute gate (px) on the center innovation. When None the
            gate is ``gate_scale`` times the predicted box diagonal.
        max_age: frames a track may go unmatched before it is dropped.

    Returns:
        list over frames of lists of BBox carrying ``track_id``. A detection that
        falls outside every gate starts a new id, which is how abrupt position
        changes turn into new shots.
    """
    if gate_distance is not None and not gate_distance > 0:
        raise ValidationError("gate_distance must be positive")
    tracks, next_id, out = [], 0, []
    for frame_boxes in detections:
        preds = [tr.predict() for tr in tracks]
        pairs = []
        for ti, pred in enumerate(preds):
            gate = gate_distance if gate_distance is not None else gate_scale * float(np.hypot(*pred[2:4]))
            for di, box in enumerate(frame_boxes):
                dist = float(np.linalg.norm(box.center - pred[:2]))
                if dist <= gate:
                    pairs.append((dist, ti, di))
        pairs.sort()
        used_t, used_d, assigned = set(), set(), {}
        for dist, ti, di in pairs:
            if ti in used_t or di in used_d:
                continue
            used_t.add(ti)
            used_d.add(di)
            assigned[di] = ti
        labeled = []
        for di, box in enumerate(frame_boxes):
            if di in assigned:
                tr = tracks[assigned[di]]
                tr.update(box)
            else:
                tr = _Track(next_id, box, process_noise, measurement_noise)
                next_id += 1
                tracks.append(tr)
                used_t.add(len(tracks) - 1)
            labeled.append(box.with_track(tr.track_id))
        for ti, tr in enumerate(tracks):
            if ti not in used_t:
                tr.misses += 1
        tracks = [tr for tr in tracks if tr.misses <= max_age]
        out.append(labeled)
    return out


@dataclass(frozen=True)
class FlowField:
    """Flow from frame ``frame_index`` to ``frame_index + 1`` sampled on a grid.

    Grid cell (r, c) sits at pixel (x, y) = (c * stride, r * stride).
    """

    frame_index: int
    flow: np.ndarray
    stride: int = 1

    def __post_init__(self):
        f = np.asarray(self.flow, dtype=float)
        if f.ndim != 3 or f.shape[-1] != 2:
            raise ValidationError("flow must have shape (H, W, 2)")
        if not np.all(np.isfinite(f)):
            raise ValidationError("flow contains non-finite vectors")
        object.__setattr__(self, "flow", f)

    @property
    def frame_pair(self):
        return self.frame_index, self.frame_index + 1

    @property
    def image_size(self):
        return self.flow.shape[1] * self.stride, self.flow.shape[0] * self.stride

    def mean_inside(self, box):
        lo, hi = box.corners()
        xs = np.arange(self.flow.shape[1]) * self.stride
        ys = np.arange(self.flow.shape[0]) * self.stride
        cols = np.flatnonzero((xs >= lo[0]) & (xs <= hi[0]))
        rows = np.flatnonzero((ys >= lo[1]) & (ys <= hi[1]))
        if cols.size == 0 or rows.size == 0:
            raise ValidationError(f"box at frame {box.frame_index} lies outside the flow field")
        return self.flow[rows[0]:rows[-1] + 1, cols[0]:cols[-1] + 1].reshape(-1, 2).mean(0)

    def mean_outside(self, box=None):
        """Mean flow magnitude over samples outside ``box`` (all samples when None)."""
        mag = np.linalg.norm(self.flow, axis=-1)
        if box is None:
            return float(mag.mean())
        lo, hi = box.corners()
        xs = np.arange(self.flow.shape[1]) * self.stride
        ys = np.arange(self.flow.shape[0]) * self.stride
        inside = ((ys[:, None] >= lo[1]) & (ys[:, None] <= hi[1]) & (xs[None] >= lo[0]) & (xs[None] <= hi[0]))
        keep = mag[~inside]
        return float(keep.mean()) if keep.size else 0.0


def _group_by_track(boxes):
    if isinstance(boxes, dict):
        return {k: sorted(v, key=lambda b: b.frame_index) for k, v in boxes.items()}
    flat = []
    for item in boxes:
        flat.extend(item if isinstance(item, (list, tuple)) else [item])
    groups = {}
    for b in flat:
        groups.setdefault(b.track_id, []).append(b)
    return {k: sorted(v, key=lambda b: b.frame_index) for k, v in groups.items()}


def detect_flow_shots(flows, boxes, threshold):
    """Per-track cuts where the mean flow inside the box exceeds ``threshold`` px/frame.

    Returns a dict track_id -> sorted cut frames; a large mean flow from t to
    t+1 yields a cut at t+1.
    """
    by_frame = {f.frame_index: f for f in flows}
    cuts = {}
    for track_id, track_boxes in _group_by_track(boxes).items():
        present = {b.frame_index for b in track_boxes}
        out = []
        for box in track_boxes:
            t = box.frame_index
            if t + 1 not in present:
                continue
            if t not in by_frame:
                raise ValidationError(f"no flow field for frame pair ({t}, {t + 1})")
            if np.linalg.norm(by_frame[t].mean_inside(box)) > threshold:
                out.append(t + 1)
        cuts[track_id] = out
    return cuts


@dataclass(frozen=True)
class Tracklet:
    start_frame: int
    end_frame: int
    track_id: int
    cut_reason: str = "end"

    def __post_init__(self):
        if self.start_frame > self.end_frame:
            raise ValidationError("tracklet start must not exceed end")
        if self.cut_reason not in CUT_REASONS:
            raise ValidationError(f"unknown cut reason {self.cut_reason!r}")

    def __len__(self):
        return self.end_frame - self.start_frame + 1


def _track_frames(track_assignments):
    if isinstance(track_assignments, dict):
        return {k: sorted(int(f) for f in v) for k, v in track_assignments.items()}
    groups = _group_by_track(track_assignments)
    return {k: [b.frame_index for b in v] for k, v in groups.items()}


def segment_sequence(content_cuts, track_assignments, flow_cuts=(), min_length=30, n_frames=None):
    """Split each track's frames into tracklets free of any cut.

    Args:
        content_cuts: frame indices (global, apply to every track).
        track_assignments: dict track_id -> frame indices, or tracked BBoxes.
        flow_cuts: frame indices (applied to every track) or dict track_id -> frame indices.
        min_length: tracklets shorter than this are discarded.
        n_frames: sequence length; a tracklet ending at the last frame gets reason "end".

    Returns:
        list of Tracklet ordered by (track_id, start_frame). Each tracklet is
        labeled with the reason for the cut that terminates it; when several
        detectors cut at the same frame, content wins over position over flow.
    """
    tracks = _track_frames(track_assignments)
    if n_frames is None:
        n_frames = 1 + max((f[-1] for f in tracks.values() if f), default=-1)
    content = set(int(c) for c in content_cuts)
    out = []
    for track_id in sorted(tracks, key=lambda k: (k is None, k)):
        frames = tracks[track_id]
        if not frames:
            continue
        flows = flow_cuts.get(track_id, ()) if isinstance(flow_cuts, dict) else flow_cuts
        flows = set(int(c) for c in flows)
        start = frames[0]
        for k, f in enumerate(frames):
            last = k == len(frames) - 1
            nxt = None if last else frames[k + 1]
            if last or nxt != f + 1:
                # track is lost or jumps: a position discontinuity unless the video ends here
                reason = "end" if f == n_frames - 1 else ("content" if f + 1 in content else "position")
            elif nxt in content:
                reason = "content"
            elif nxt in flows:
                reason = "flow"
            else:
                continue
            if f - start + 1 >= min_length:
                out.append(Tracklet(start, f, track_id, reason))
            if nxt is not None:
                start = nxt
    return out
