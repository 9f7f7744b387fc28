"""Rule-based frame descriptions: posecodes, aggregation and templated sentences."""
import json
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources

import numpy as np

from .errors import ValidationError
from .skeleton import default_skeleton

logger = logging.getLogger(__name__)

REGIONS = ("body", "hands", "face")
SIDES = ("left", "right")
_TEMPLATE_GROUP = {"elbow": "bend", "knee": "bend", "hand_height": "place", "hand_front": "place",
                   "hand_head": "place", "hands_apart": "pair", "feet_apart": "pair",
                   "finger": "finger", "spread": "spread", "emotion": "emotion"}


@lru_cache(maxsize=None)
def load_codebook(path=None):
    """Parsed codebook; the bundled ``posecodes_v1.json`` by default."""
    if path is None:
        text = resources.files("mocapkit").joinpath("data/posecodes_v1.json").read_text()
    else:
        with open(path) as fh:
            text = fh.read()
    book = json.loads(text)
    for name, rule in book["body"].items():
        _check_bins(name, rule["bins"], rule["range"])
    _check_bins("curvature", book["fingers"]["curvature"]["bins"], book["fingers"]["curvature"]["range"])
    return book


def _check_bins(name, bins, rng):
    uppers = [b[0] for b in bins]
    if uppers != sorted(uppers) or len(set(uppers)) != len(uppers):
        raise ValidationError(f"codebook bins for {name} must be strictly increasing")
    if uppers[-1] < rng[1]:
        raise ValidationError(f"codebook bins for {name} do not cover the measured range")


def bin_label(value, bins):
    """Label of the bin holding ``value``: bins are (prev, upper] and the first one is closed below."""
    for upper, label in bins:
        if value <= upper:
            return label
    return bins[-1][1]


@dataclass(frozen=True)
class PoseCode:
    """One categorical observation about a body part.

    ``kind`` names the rule (e.g. "knee", "finger"), ``part`` refines it
    ("index"), ``side`` is "left", "right", "both" or None.
    """

    kind: str
    label: str
    side: str = None
    part: str = None
    value: float = float("nan")
    neutral: bool = False
    region: str = "body"

    @property
    def key(self):
        return self.kind, self.part, self.side, self.label


@dataclass
class Description:
    sentences: list = field(default_factory=list)
    provenance: list = field(default_factory=list)

    @property
    def text(self):
        return " ".join(self.sentences)


def interior_angle(a, b, c):
    """Angle at ``b`` (degrees) between b->a and b->c."""
    u = np.asarray(a, float) - b
    v = np.asarray(c, float) - b
    return _angle(u, v)


def _angle(u, v):
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise ValidationError("degenerate segment in angle measurement")
    cos = np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0)
    return float(np.degrees(np.arccos(cos)))


def body_frame(joints, skeleton=None):
    """Origin, 3x3 axes (rows: left, up, forward) and torso length from pelvis, hips and neck."""
    skeleton = skeleton or default_skeleton()
    j = np.asarray(joints, float)
    pelvis = j[skeleton.index("pelvis")]
    left = j[skeleton.index("left_hip")] - j[skeleton.index("right_hip")]
    up = j[skeleton.index("neck")] - pelvis
    torso = float(np.linalg.norm(up))
    left = left / np.linalg.norm(left)
    up = up - (up @ left) * left
    up = up / np.linalg.norm(up)
    fwd = np.cross(left, up)
    return pelvis, np.stack([left, up, fwd]), torso


def body_posecodes(joints, skeleton=None, codebook=None):
    """Evaluate every body rule on one frame of joints (J, 3)."""
    skeleton = skeleton or default_skeleton()
    book = codebook or load_codebook()
    j = np.asarray(joints, float)
    if j.shape != (skeleton.joint_count, 3) or not np.all(np.isfinite(j)):
        raise ValidationError(f"expected finite joints of shape ({skeleton.joint_count}, 3)")
    _, axes, torso = body_frame(j, skeleton)
    codes = []
    for kind, rule in book["body"].items():
        sides = SIDES if rule.get("bilateral", True) else (None,)
        for side in sides:
            pts = [j[skeleton.index(n.format(side=side))] for n in rule["joints"]]
            m = rule["measure"]
            if m == "interior_angle":
                value = interior_angle(*pts)
            elif m == "relative_up":
                value = float(axes[1] @ (pts[0] - pts[1])) / torso
            elif m == "relative_forward":
                value = float(axes[2] @ (pts[0] - pts[1])) / torso
            elif m == "distance":
                value = float(np.linalg.norm(pts[0] - pts[1])) / torso
            else:
                raise ValidationError(f"unknown measure {m}")
            label = bin_label(value, rule["bins"])
            codes.append(PoseCode(kind, label, side, None, value, label == rule["neutral"], "body"))
    return codes


def finger_angle(wrist, tip, root):
    """Angle (degrees) between the wrist->fingertip and fingertip->finger-root vectors."""
    wrist, tip, root = (np.asarray(p, float) for p in (wrist, tip, root))
    return _angle(tip - wrist, root - tip)


def classify_finger_pose(hand_joints, finger, side="left", skeleton=None, codebook=None):
    """Curvature code of one finger from a full joint array (J, 3) or a name -> point mapping.

    Returns None (and logs why) when a needed keypoint is missing or not finite.
    """
    skeleton = skeleton or default_skeleton()
    book = codebook or load_codebook()
    names = (f"{side}_wrist", f"{side}_{finger}_tip", f"{side}_{finger}1")
    pts = []
    for n in names:
        try:
            p = hand_joints[n] if isinstance(hand_joints, dict) else np.asarray(hand_joints)[skeleton.index(n)]
        except (KeyError, IndexError):
            p = None
        if p is None or not np.all(np.isfinite(p)):
            logger.warning("finger code for %s %s omitted: keypoint %s missing", side, finger, n)
            return None
        pts.append(np.asarray(p, float))
    try:
        value = finger_angle(*pts)
    except ValidationError:
        logger.warning("finger code for %s %s omitted: degenerate geometry", side, finger)
        return None
    rule = book["fingers"]["curvature"]
    label = bin_label(value, rule["bins"])
    return PoseCode("finger", label, side, finger, value, label == rule["neutral"], "hands")


def hand_spread(joints, side="left", skeleton=None, codebook=None):
    """Spread code from the mean adjacent fingertip distance (thumb excluded) over hand length."""
    skeleton = skeleton or default_skeleton()
    book = codebook or load_codebook()
    j = np.asarray(joints, float)
    tips = [j[skeleton.index(f"{side}_{f}_tip")] for f in book["fingers"]["names"][1:]]
    hand = np.linalg.norm(j[skeleton.index(f"{side}_middle_tip")] - j[skeleton.index(f"{side}_wrist")])
    if not hand > 0:
        raise ValidationError("zero hand length")
    value = float(np.mean([np.linalg.norm(a - b) for a, b in zip(tips[:-1], tips[1:])]) / hand)
    rule = book["fingers"]["spread"]
    label = rule["above"] if value > rule["cutoff"] else rule["below"]
    return PoseCode("spread", label, side, None, value, label == rule["neutral"], "hands")


def frame_posecodes(joints, skeleton=None, codebook=None):
    """Body, finger-curvature and spread codes of one frame."""
    skeleton = skeleton or default_skeleton()
    book = codebook or load_codebook()
    codes = body_posecodes(joints, skeleton, book)
    for side in SIDES:
        for finger in book["fingers"]["names"]:
            code = classify_finger_pose(joints, finger, side, skeleton, book)
            if code is not None:
                codes.append(code)
        codes.append(hand_spread(joints, side, skeleton, book))
    return codes


def _order(book):
    kinds = list(book["body"]) + ["finger", "spread", "emotion"]
    fingers = book["fingers"]["names"]

    def key(c):
        side = {"left": 0, "right": 1, "both": 2, None: 3}[c.side]
        part = fingers.index(c.part) if c.part in fingers else -1
        return REGIONS.index(c.region), kinds.index(c.kind) if c.kind in kinds else len(kinds), part, side
    return key


def aggregate_codes(codes, codebook=None):
    """Drop neutral codes, fold matching left/right pairs into "both" and order body -> hands -> face."""
    book = codebook or load_codebook()
    live = [c for c in codes if not c.neutral]
    out, used = [], set()
    for i, c in enumerate(live):
        if i in used:
            continue
        if c.side in SIDES:
            other = "right" if c.side == "left" else "left"
            match = next((k for k, d in enumerate(live) if k not in used and k != i and d.side == other
                          and (d.kind, d.part, d.label) == (c.kind, c.part, c.label)), None)
            if match is not None:
                used.add(match)
                c = PoseCode(c.kind, c.label, "both", c.part, float("nan"), False, c.region)
        used.add(i)
        out.append(c)
    return sorted(out, key=_order(book))


_SUBJECTS = {"hands_apart": "hands", "feet_apart": "feet"}


def _words(code, book):
    """Subject phrase, verb and hand phrase for a code."""
    plural = code.side == "both"
    if code.kind == "finger":
        noun = "thumb" if code.part == "thumb" else f"{code.part} finger"
    elif code.kind in book["body"]:
        noun = book["body"][code.kind]["subject"]
    else:
        noun = code.kind
    if code.kind in _SUBJECTS:
        return _SUBJECTS[code.kind], "are", ""
    if code.kind == "spread":
        return ("both hands" if plural else f"{code.side} hand"), "is", ""
    subject = f"both {noun}s" if plural else f"{code.side} {noun}"
    hand = "both hands" if plural else f"{code.side} hand"
    return subject, ("are" if plural else "is"), hand


def render_description(codes, emotion=None, seed=0, codebook=None):
    """One sentence per code plus an optional expression sentence; template variants drawn from ``seed``."""
    book = codebook or load_codebook()
    rng = np.random.default_rng(seed)
    desc = Description()
    items = list(codes)
    if emotion:
        items.append(PoseCode("emotion", str(emotion), None, None, float("nan"), False, "face"))
    for code in items:
        variants = book["templates"][_TEMPLATE_GROUP[code.kind]]
        template = variants[int(rng.integers(len(variants)))]
        subject, verb, hand = _words(code, book)
        finger = code.part if code.part == "thumb" else f"{code.part} finger"
        if code.side == "both" and code.kind == "finger":
            finger += "s"
        text = template.format(subject=subject, Subject=subject[:1].upper() + subject[1:], verb=verb,
                               label=code.label, hand=hand, finger=finger)
        desc.sentences.append(text)
        desc.provenance.append([code])
    return desc


def describe_frame(joints, emotion=None, seed=0, skeleton=None, codebook=None):
    """Joints (J, 3) -> Description."""
    book = codebook or load_codebook()
    return render_description(aggregate_codes(frame_posecodes(joints, skeleton, book), book), emotion, seed, book)
