"""Skeletal pose representation: bone direction vectors, included angles,
and the nested motion hierarchy.

Poses are stored as unit direction vectors per bone, which makes them
invariant to global translation and bone length.  Angles are kept in
degrees throughout this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

ROOT = -1


class PoseError(Exception):
    pass


class ZeroLengthBone(PoseError):
    def __init__(self, frame: int, bone: int):
        super().__init__(f"bone {bone} collapses below 1e-9 at frame {frame}")
        self.frame = frame
        self.bone = bone


class NonPositiveLength(PoseError):
    pass


class LevelOutOfRange(PoseError):
    pass


class InsufficientData(PoseError):
    pass


@dataclass(frozen=True)
class Skeleton:
    """Joint tree plus the bone ordering used for direction vectors.

    ``bone_chain`` has exactly J-1 (parent, child) pairs; its order defines
    the layout of every flattened pose vector.  ``angle_pairs`` lists pairs
    of bone indices (into ``bone_chain``) that share a joint, i.e. the
    consecutive bones for which included angles are defined.
    """

    joint_count: int
    parent_index: tuple[int, ...]
    bone_chain: tuple[tuple[int, int], ...]
    angle_pairs: tuple[tuple[int, int], ...]

    def __post_init__(self):
        j = self.joint_count
        if len(self.parent_index) != j:
            raise ValueError("parent_index length must equal joint_count")
        roots = [i for i, p in enumerate(self.parent_index) if p == ROOT]
        if len(roots) != 1:
            raise ValueError(f"skeleton must have exactly one root (got {roots})")
        if len(self.bone_chain) != j - 1:
            raise ValueError("bone_chain must have exactly J-1 entries")
        for a, b in self.angle_pairs:
            if self.bone_chain[a][1] != self.bone_chain[b][0]:
                raise ValueError(f"angle pair ({a},{b}) does not share a joint")

    @property
    def bone_count(self) -> int:
        return self.joint_count - 1

    def bone_index(self, parent: int, child: int) -> int:
        return self.bone_chain.index((parent, child))


@dataclass(frozen=True)
class MotionHierarchy:
    """Cumulative joint partition; level h is a superset of level h-1.

    ``pose_dims[h]`` is the flattened direction-vector dimension of the
    bones whose both endpoints lie in ``levels[h]``.
    """

    levels: tuple[frozenset[int], ...]
    bone_masks: tuple[np.ndarray, ...] = field(repr=False)
    pose_dims: tuple[int, ...]

    @property
    def depth(self) -> int:
        return len(self.levels)


@dataclass
class PoseSequence:
    """N frames of unit direction vectors, one per bone."""

    vectors: np.ndarray  # (N, J-1, 3)
    fps: float = 15.0

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 3 or self.vectors.shape[-1] != 3:
            raise ValueError("vectors must have shape (N, J-1, 3)")
        if self.vectors.shape[0] < 1:
            raise ValueError("need at least one frame")

    @property
    def frames(self) -> int:
        return self.vectors.shape[0]

    @property
    def bone_count(self) -> int:
        return self.vectors.shape[1]

    def check_unit_norm(self, tol: float = 1e-6) -> bool:
        norms = np.linalg.norm(self.vectors, axis=-1)
        return bool(np.all(np.abs(norms - 1.0) <= tol))


@dataclass(frozen=True)
class AngleProfile:
    """Per-angle mean (degrees) and population variance (degrees^2)."""

    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "means", np.asarray(self.means, dtype=np.float64))
        object.__setattr__(self, "variances", np.asarray(self.variances, dtype=np.float64))
        if self.means.shape != self.variances.shape:
            raise ValueError("means/variances shape mismatch")


# --- default 43-joint upper-body skeleton ---------------------------------
# Keypoints: spine 0, neck 1, L/R shoulder 2/3, L/R elbow 4/5, L/R wrist 6/7,
# left fingers 8..22 (index, middle, pinky, ring, thumb; 3 joints each),
# right fingers 23..37, nose 38, R/L eye 39/40, R/L ear 41/42.

_PARENTS_43 = [
    ROOT, 0, 1, 1, 2, 3, 4, 5,
    6, 8, 9,      # left index
    6, 11, 12,    # left middle
    6, 14, 15,    # left pinky
    6, 17, 18,    # left ring
    6, 20, 21,    # left thumb
    7, 23, 24,    # right index
    7, 26, 27,    # right middle
    7, 29, 30,    # right pinky
    7, 32, 33,    # right ring
    7, 35, 36,    # right thumb
    1, 38, 38, 39, 40,
]

# Head/torso joints first, then per-level additions outward to fingertips.
_LEVEL_JOINTS_43 = [
    [0, 1, 2, 3, 38, 39, 40, 41, 42],
    [4, 5],
    [6, 7],
    [8, 11, 14, 17, 20, 23, 26, 29, 32, 35],
    [9, 12, 15, 18, 21, 24, 27, 30, 33, 36],
    [10, 13, 16, 19, 22, 25, 28, 31, 34, 37],
]


def _ordered_bones(parents: list[int], level_joints: list[list[int]]) -> list[tuple[int, int]]:
    """Bones grouped by the hierarchy level at which they first appear.

    This ordering makes every level's slice a literal prefix of the next.
    """
    level_of = {}
    for lv, joints in enumerate(level_joints):
        for j in joints:
            level_of[j] = lv
    bones = [(p, c) for c, p in enumerate(parents) if p != ROOT]

    def key(bone):
        p, c = bone
        return (max(level_of[p], level_of[c]), c)

    return sorted(bones, key=key)


def _derive_angle_pairs(bone_chain: list[tuple[int, int]]) -> list[tuple[int, int]]:
    """All (bone into joint, bone out of joint) index pairs along chains."""
    pairs = []
    for i, (_, child) in enumerate(bone_chain):
        for k, (p2, _) in enumerate(bone_chain):
            if p2 == child:
                pairs.append((i, k))
    return pairs


def _build_hierarchy(skeleton: Skeleton, level_joints: list[list[int]]) -> MotionHierarchy:
    levels = []
    acc: set[int] = set()
    for joints in level_joints:
        acc |= set(joints)
        levels.append(frozenset(acc))
    masks, dims = [], []
    for lv in levels:
        mask = np.array([(p in lv and c in lv) for p, c in skeleton.bone_chain], dtype=bool)
        masks.append(mask)
        dims.append(int(mask.sum()) * 3)
    return MotionHierarchy(tuple(levels), tuple(masks), tuple(dims))


def default_skeleton() -> Skeleton:
    bones = _ordered_bones(_PARENTS_43, _LEVEL_JOINTS_43)
    return Skeleton(
        joint_count=43,
        parent_index=tuple(_PARENTS_43),
        bone_chain=tuple(bones),
        angle_pairs=tuple(_derive_angle_pairs(bones)),
    )


def default_hierarchy(skeleton: Skeleton | None = None) -> MotionHierarchy:
    return _build_hierarchy(skeleton or default_skeleton(), _LEVEL_JOINTS_43)


def holistic_hierarchy(skeleton: Skeleton) -> MotionHierarchy:
    """Single-level hierarchy covering every joint (no coarse-to-fine)."""
    all_joints = [list(range(skeleton.joint_count))]
    return _build_hierarchy(skeleton, all_joints)


def load_skeleton_json(path) -> tuple[Skeleton, MotionHierarchy]:
    """Load {"joints": J, "parents": [...], "levels": [[...], ...]}."""
    with open(path) as fh:
        doc = json.load(fh)
    try:
        j = int(doc["joints"])
        parents = [int(p) for p in doc["parents"]]
        levels = [[int(x) for x in lv] for lv in doc["levels"]]
    except KeyError as exc:
        raise ValueError(f"skeleton JSON missing field {exc}") from exc
    bones = _ordered_bones(parents, levels)
    skel = Skeleton(j, tuple(parents), tuple(bones), tuple(_derive_angle_pairs(bones)))
    return skel, _build_hierarchy(skel, levels)


# --- operations ------------------------------------------------------------

def joints_to_dirvecs(joints: np.ndarray, skeleton: Skeleton, fps: float = 15.0) -> PoseSequence:
    """Convert (N, J, 3) coordinates into unit direction vectors per bone."""
    joints = np.asarray(joints, dtype=np.float64)
    if joints.ndim != 3 or joints.shape[1] != skeleton.joint_count or joints.shape[2] != 3:
        raise ValueError(f"expected (N, {skeleton.joint_count}, 3) joints, got {joints.shape}")
    parents = np.array([p for p, _ in skeleton.bone_chain])
    children = np.array([c for _, c in skeleton.bone_chain])
    diff = joints[:, children] - joints[:, parents]
    norms = np.linalg.norm(diff, axis=-1)
    bad = np.argwhere(norms < 1e-9)
    if bad.size:
        frame, bone = map(int, bad[0])
        raise ZeroLengthBone(frame, bone)
    return PoseSequence(diff / norms[..., None], fps=fps)


def dirvecs_to_joints(pose: PoseSequence, bone_lengths: np.ndarray,
                      skeleton: Skeleton, root: np.ndarray | None = None) -> np.ndarray:
    """Forward kinematics: rebuild (N, J, 3) coordinates from directions."""
    lengths = np.asarray(bone_lengths, dtype=np.float64)
    if lengths.shape != (skeleton.bone_count,):
        raise ValueError("bone_lengths must have one entry per bone")
    if np.any(lengths <= 0):
        raise NonPositiveLength(f"bone lengths must be positive, got min {lengths.min()}")
    n = pose.frames
    joints = np.zeros((n, skeleton.joint_count, 3))
    root_idx = skeleton.parent_index.index(ROOT)
    joints[:, root_idx] = np.zeros(3) if root is None else np.asarray(root, dtype=np.float64)
    # bone_chain is ordered so a parent joint is always placed before its
    # children (hierarchy levels are outward-growing)
    placed = {root_idx}
    pending = list(enumerate(skeleton.bone_chain))
    while pending:
        rest = []
        for b, (p, c) in pending:
            if p in placed:
                joints[:, c] = joints[:, p] + lengths[b] * pose.vectors[:, b]
                placed.add(c)
            else:
                rest.append((b, (p, c)))
        if len(rest) == len(pending):
            raise ValueError("bone_chain is not a tree reachable from the root")
        pending = rest
    return joints


def bone_angles(pose: PoseSequence, skeleton: Skeleton) -> np.ndarray:
    """Included angles (degrees) for every angle pair, shape (N, A)."""
    i = np.array([a for a, _ in skeleton.angle_pairs])
    k = np.array([b for _, b in skeleton.angle_pairs])
    dots = np.einsum("nbc,nbc->nb", pose.vectors[:, i], pose.vectors[:, k])
    return np.degrees(np.arccos(np.clip(dots, -1.0, 1.0)))


def hierarchy_slice(pose: PoseSequence, level: int, hierarchy: MotionHierarchy) -> np.ndarray:
    """Flattened (N, pose_dims[level-1]) slice of the bones in a level."""
    if not 1 <= level <= hierarchy.depth:
        raise LevelOutOfRange(f"level {level} not in 1..{hierarchy.depth}")
    mask = hierarchy.bone_masks[level - 1]
    return pose.vectors[:, mask].reshape(pose.frames, -1)


def angle_statistics(poses, skeleton: Skeleton) -> AngleProfile:
    """Mean and population variance of each included angle, in degrees."""
    chunks = [bone_angles(p, skeleton) for p in poses]
    if not chunks or sum(c.shape[0] for c in chunks) < 2:
        raise InsufficientData("need at least 2 frames overall")
    angles = np.concatenate(chunks, axis=0)
    return AngleProfile(angles.mean(axis=0), angles.var(axis=0))
