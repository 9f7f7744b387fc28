"""Self-describing sequence archive: a zip of ``manifest.json``, ``records.json`` and ``.npy`` blocks.

Array keys are slash-separated paths such as ``keypoints_2d/0/points`` or
``cameras/0/rotation``; each is stored as ``arrays/<key>.npy``. Writing is
byte-deterministic: entries are sorted and carry a fixed timestamp.
"""
import io
import json
import zipfile
from dataclasses import dataclass, field

import numpy as np

from ..errors import SchemaError, ValidationError
from ..model import BodyShape, CameraState, KeypointFrame2D, KeypointFrame3D, MotionSequence, WholeBodyPose

SCHEMA_VERSION = 1
_STAMP = (1980, 1, 1, 0, 0, 0)
_MANIFEST_KEYS = {"schema_version", "fps", "skeleton_id", "view_count", "n_frames", "arrays"}


@dataclass
class SequenceArchive:
    """In-memory archive: manifest fields, named arrays and JSON records."""

    fps: float
    n_frames: int
    skeleton_id: str = "wholebody71-v1"
    view_count: int = 1
    arrays: dict = field(default_factory=dict)
    records: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.fps > 0:
            raise ValidationError("fps must be positive")
        if self.n_frames < 0 or self.view_count < 0:
            raise ValidationError("frame and view counts must be non-negative")

    def copy(self):
        return SequenceArchive(self.fps, self.n_frames, self.skeleton_id, self.view_count,
                               {k: v.copy() for k, v in self.arrays.items()}, json.loads(json.dumps(self.records)))

    def __contains__(self, key):
        return key in self.arrays

    def __getitem__(self, key):
        try:
            return self.arrays[key]
        except KeyError:
            raise ValidationError(f"archive has no array '{key}'") from None

    def __setitem__(self, key, value):
        self.arrays[key] = np.ascontiguousarray(value)

    def keys(self, prefix=""):
        return sorted(k for k in self.arrays if k.startswith(prefix))

    def drop(self, prefix):
        for k in self.keys(prefix):
            del self.arrays[k]

    # typed views ----------------------------------------------------------------

    def poses(self, key="poses"):
        return WholeBodyPose.from_vector(self[key])

    def set_poses(self, poses, key="poses"):
        self[key] = np.atleast_2d(poses.to_vector())

    def shape(self):
        return BodyShape(self["shape"]) if "shape" in self else BodyShape()

    def keypoints_2d(self, view=0):
        base = f"keypoints_2d/{view}"
        return KeypointFrame2D(self[f"{base}/points"], self[f"{base}/confidence"])

    def set_keypoints_2d(self, kp, view=0):
        self[f"keypoints_2d/{view}/points"] = kp.points
        self[f"keypoints_2d/{view}/confidence"] = kp.confidence

    def keypoints_3d(self):
        return KeypointFrame3D(self["keypoints_3d/points"], self["keypoints_3d/confidence"])

    def set_keypoints_3d(self, kp):
        self["keypoints_3d/points"] = kp.points
        self["keypoints_3d/confidence"] = kp.confidence

    def cameras(self, view=0, prefix="cameras"):
        """Per-frame CameraState list for one view."""
        base = f"{prefix}/{view}"
        k, r, t, s = (self[f"{base}/{n}"] for n in ("intrinsics", "rotation", "translation", "scale"))
        return [CameraState(k[i], r[i], t[i], float(s[i])) for i in range(len(k))]

    def set_cameras(self, cameras, view=0, prefix="cameras"):
        base = f"{prefix}/{view}"
        self[f"{base}/intrinsics"] = np.stack([c.intrinsics for c in cameras])
        self[f"{base}/rotation"] = np.stack([c.rotation for c in cameras])
        self[f"{base}/translation"] = np.stack([c.translation for c in cameras])
        self[f"{base}/scale"] = np.array([c.scale for c in cameras])

    def sequence(self):
        """MotionSequence from poses, shape and keypoints present in the archive."""
        views = tuple(self.keypoints_2d(v) for v in range(self.view_count) if f"keypoints_2d/{v}/points" in self)
        k3 = self.keypoints_3d() if "keypoints_3d/points" in self else None
        return MotionSequence(self.poses(), self.fps, self.records.get("subject_id", "subject"), views, k3,
                              self.shape())


def _npy_bytes(a):
    buf = io.BytesIO()
    np.save(buf, np.asarray(a), allow_pickle=False)
    return buf.getvalue()


def _entry(zf, name, data):
    info = zipfile.ZipInfo(name, date_time=_STAMP)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data, compresslevel=6)


def archive_bytes(archive):
    """Serialized archive; identical content gives identical bytes."""
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "fps": float(archive.fps),
        "skeleton_id": archive.skeleton_id,
        "view_count": int(archive.view_count),
        "n_frames": int(archive.n_frames),
        "arrays": {k: {"dtype": str(archive.arrays[k].dtype), "shape": list(archive.arrays[k].shape)}
                   for k in sorted(archive.arrays)},
    }
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w") as zf:
        _entry(zf, "manifest.json", json.dumps(manifest, sort_keys=True, indent=1).encode())
        _entry(zf, "records.json", json.dumps(archive.records, sort_keys=True, indent=1).encode())
        for k in sorted(archive.arrays):
            _entry(zf, f"arrays/{k}.npy", _npy_bytes(archive.arrays[k]))
    return buf.getvalue()


def write_archive(archive, path):
    data = archive_bytes(archive)
    with open(path, "wb") as fh:
        fh.write(data)
    return path


def read_archive(path):
    """Load an archive, checking the schema version and every declared block."""
    try:
        zf = zipfile.ZipFile(path)
    except (zipfile.BadZipFile, FileNotFoundError) as exc:
        raise SchemaError(f"cannot open archive {path}: {exc}") from None
    with zf:
        names = set(zf.namelist())
        if "manifest.json" not in names or "records.json" not in names:
            raise SchemaError("archive lacks manifest.json or records.json")
        manifest = json.loads(zf.read("manifest.json"))
        if manifest.get("schema_version") != SCHEMA_VERSION:
            raise SchemaError(f"archive schema version {manifest.get('schema_version')!r}, expected {SCHEMA_VERSION}")
        if set(manifest) != _MANIFEST_KEYS:
            raise SchemaError(f"unexpected manifest fields: {sorted(set(manifest) ^ _MANIFEST_KEYS)}")
        arrays = {}
        for key, meta in manifest["arrays"].items():
            name = f"arrays/{key}.npy"
            if name not in names:
                raise SchemaError(f"array block '{key}' missing")
            a = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
            if str(a.dtype) != meta["dtype"] or list(a.shape) != meta["shape"]:
                raise SchemaError(f"array block '{key}' does not match its manifest entry")
            arrays[key] = a
        records = json.loads(zf.read("records.json"))
    return SequenceArchive(manifest["fps"], manifest["n_frames"], manifest["skeleton_id"], manifest["view_count"],
                           arrays, records)


def archive_from_sequence(seq, cameras=None):
    """Archive holding a MotionSequence and, optionally, per-view camera lists."""
    views = max(len(seq.keypoints_2d), len(cameras) if cameras else 0, 1)
    arc = SequenceArchive(seq.fps, len(seq), view_count=views, records={"subject_id": seq.subject_id})
    arc.set_poses(seq.poses)
    arc["shape"] = seq.shape.beta
    for v, kp in enumerate(seq.keypoints_2d):
        arc.set_keypoints_2d(kp, v)
    if seq.keypoints_3d is not None:
        arc.set_keypoints_3d(seq.keypoints_3d)
    for v, cams in enumerate(cameras or ()):
        arc.set_cameras(cams, v)
    return arc
