"""Regenerate src/mocapkit/data/skeleton_v1.json.

Run from the repo root: ``python3 tools/build_skeleton_template.py``.
"""
import json
from pathlib import Path

# (name, parent, offset) for the left side; right side mirrors x.
BODY = [
    ("pelvis", None, (0.0, 0.0, 0.0)),
    ("left_hip", "pelvis", (0.09, -0.08, 0.0)),
    ("right_hip", "pelvis", (-0.09, -0.08, 0.0)),
    ("spine1", "pelvis", (0.0, 0.11, -0.01)),
    ("left_knee", "left_hip", (0.0, -0.38, 0.0)),
    ("right_knee", "right_hip", (0.0, -0.38, 0.0)),
    ("spine2", "spine1", (0.0, 0.13, 0.0)),
    ("left_ankle", "left_knee", (0.0, -0.40, -0.02)),
    ("right_ankle", "right_knee", (0.0, -0.40, -0.02)),
    ("spine3", "spine2", (0.0, 0.05, 0.01)),
    ("left_foot", "left_ankle", (0.0, -0.05, 0.12)),
    ("right_foot", "right_ankle", (0.0, -0.05, 0.12)),
    ("neck", "spine3", (0.0, 0.21, -0.02)),
    ("left_collar", "spine3", (0.07, 0.11, 0.0)),
    ("right_collar", "spine3", (-0.07, 0.11, 0.0)),
    ("head", "neck", (0.0, 0.09, 0.04)),
    ("left_shoulder", "left_collar", (0.11, 0.03, -0.01)),
    ("right_shoulder", "right_collar", (-0.11, 0.03, -0.01)),
    ("left_elbow", "left_shoulder", (0.26, 0.0, 0.0)),
    ("right_elbow", "right_shoulder", (-0.26, 0.0, 0.0)),
    ("left_wrist", "left_elbow", (0.25, 0.0, 0.0)),
    ("right_wrist", "right_elbow", (-0.25, 0.0, 0.0)),
    ("jaw", "head", (0.0, -0.02, 0.05)),
]

FINGERS = {
    # root offset from wrist, then the two distal segments, then the tip marker
    "thumb": [(0.025, -0.01, 0.03), (0.03, -0.005, 0.02), (0.025, 0.0, 0.012), (0.02, 0.0, 0.006)],
    "index": [(0.09, 0.0, 0.025), (0.04, 0.0, 0.0), (0.025, 0.0, 0.0), (0.02, 0.0, 0.0)],
    "middle": [(0.095, 0.0, 0.003), (0.045, 0.0, 0.0), (0.028, 0.0, 0.0), (0.022, 0.0, 0.0)],
    "ring": [(0.088, 0.0, -0.018), (0.04, 0.0, 0.0), (0.026, 0.0, 0.0), (0.02, 0.0, 0.0)],
    "pinky": [(0.075, 0.0, -0.036), (0.03, 0.0, 0.0), (0.02, 0.0, 0.0), (0.018, 0.0, 0.0)],
}

FACE_MARKERS = [
    ("nose", "head", (0.0, 0.02, 0.10)),
    ("left_eye", "head", (0.03, 0.05, 0.08)),
    ("right_eye", "head", (-0.03, 0.05, 0.08)),
    ("left_ear", "head", (0.07, 0.03, 0.0)),
    ("right_ear", "head", (-0.07, 0.03, 0.0)),
    ("chin", "jaw", (0.0, -0.05, 0.06)),
]
HEELS = [
    ("left_heel", "left_ankle", (0.0, -0.05, -0.05)),
    ("right_heel", "right_ankle", (0.0, -0.05, -0.05)),
]


def mirror(v):
    return (-v[0], v[1], v[2])


def build():
    joints = list(BODY)
    tips = []
    for side in ("left", "right"):
        for finger, segs in FINGERS.items():
            parent = f"{side}_wrist"
            for k in range(3):
                off = segs[k] if side == "left" else mirror(segs[k])
                name = f"{side}_{finger}{k + 1}"
                joints.append((name, parent, off))
                parent = name
            off = segs[3] if side == "left" else mirror(segs[3])
            tips.append((f"{side}_{finger}_tip", parent, off))
    joints += tips + FACE_MARKERS + HEELS
    names = [j[0] for j in joints]
    index = {n: i for i, n in enumerate(names)}
    parents = [-1 if p is None else index[p] for _, p, _ in joints]
    offsets = [list(o) for _, _, o in joints]

    n_rot = 53  # 22 body + jaw + 30 hand joints carry rotations
    groups = {
        "body": [index[n] for n, _, _ in BODY if n != "jaw"] + [index["left_heel"], index["right_heel"]],
        "hand": [i for i, n in enumerate(names) if any(f in n for f in FINGERS)]
        + [index["left_wrist"], index["right_wrist"]],
        "left_hand": [index["left_wrist"]] + [i for i, n in enumerate(names) if n.startswith("left_") and any(f in n for f in FINGERS)],
        "right_hand": [index["right_wrist"]] + [i for i, n in enumerate(names) if n.startswith("right_") and any(f in n for f in FINGERS)],
        "face": [index[n] for n in ("jaw", "head", "nose", "left_eye", "right_eye", "left_ear", "right_ear", "chin")],
        "foot": [index[n] for n in ("left_ankle", "right_ankle", "left_foot", "right_foot", "left_heel", "right_heel")],
        "lower": [index[n] for n in ("left_hip", "right_hip", "left_knee", "right_knee", "left_ankle", "right_ankle", "left_foot", "right_foot")],
    }

    # COCO-WholeBody 133 -> skeleton joint (or -1 when the keypoint has no joint).
    wb = [-1] * 133
    body17 = ["nose", "left_eye", "right_eye", "left_ear", "right_ear", "left_shoulder", "right_shoulder",
              "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hip", "right_hip",
              "left_knee", "right_knee", "left_ankle", "right_ankle"]
    for k, n in enumerate(body17):
        wb[k] = index[n]
    wb[17] = index["left_foot"]   # big toe
    wb[19] = index["left_heel"]
    wb[20] = index["right_foot"]
    wb[22] = index["right_heel"]
    wb[23 + 8] = index["chin"]
    for base, side in ((91, "left"), (112, "right")):
        wb[base] = index[f"{side}_wrist"]
        k = base + 1
        for finger in FINGERS:
            for seg in (1, 2, 3):
                wb[k] = index[f"{side}_{finger}{seg}"]
                k += 1
            wb[k] = index[f"{side}_{finger}_tip"]
            k += 1

    # beta -> per-joint bone-scale rows (bone of joint j = edge parent(j) -> j).
    n = len(names)
    rows = [[0.0] * n for _ in range(10)]
    arm = {"shoulder", "elbow", "wrist", "collar"}
    leg = {"hip", "knee", "ankle", "foot", "heel"}
    for j, name in enumerate(names):
        if parents[j] < 0:
            continue
        part = name.split("_", 1)[-1]
        rows[0][j] = 0.05  # overall stature
        if part in leg:
            rows[1][j] = 0.04
        if part in arm:
            rows[2][j] = 0.04
        if name.startswith("spine") or name in ("neck", "head"):
            rows[3][j] = 0.04
        if any(f in name for f in FINGERS):
            rows[4][j] = 0.03
        if name in ("left_hip", "right_hip", "left_collar", "right_collar"):
            rows[5][j] = 0.05  # breadth
        if part in ("knee",):
            rows[6][j] = 0.03
        if part in ("ankle",):
            rows[7][j] = 0.03
        if part in ("elbow",):
            rows[8][j] = 0.03
        if part in ("wrist",):
            rows[9][j] = 0.03

    return {
        "schema": "mocapkit.skeleton",
        "version": 1,
        "skeleton_id": "wholebody71_v1",
        "up_axis": [0.0, 1.0, 0.0],
        "forward_axis": [0.0, 0.0, 1.0],
        "joint_names": names,
        "parents": parents,
        "rest_offsets": offsets,
        "rotation_joint_count": n_rot,
        "joint_groups": groups,
        "wholebody_index": wb,
        "beta_scale_rows": rows,
    }


if __name__ == "__main__":
    out = Path(__file__).resolve().parents[1] / "src" / "mocapkit" / "data" / "skeleton_v1.json"
    out.write_text(json.dumps(build(), indent=1) + "\n")
    print(f"wrote {out}")
