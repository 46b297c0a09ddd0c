"""Articulated capsule body: kinematic tree, shape-scaled bones, skinning.

All pose-dependent functions accept numpy arrays or :class:`Tensor` inputs and
are batched over a leading axis. Passing tensors while a tape is active makes
the outputs differentiable with respect to pose, orientation and shape.
"""
from __future__ import annotations

import hashlib
import warnings
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor, concat, matmul, rotation_coeffs, stack

N_BETAS = 10
SCALE_CLAMP = (0.2, 3.0)

JOINTS_17 = (
    "pelvis", "spine", "chest", "neck", "head",
    "left_hip", "left_knee", "left_ankle",
    "right_hip", "right_knee", "right_ankle",
    "left_shoulder", "left_elbow", "left_wrist",
    "right_shoulder", "right_elbow", "right_wrist",
)

# SMPL ordering; roles shared with the 17-joint layout keep the same names.
JOINTS_24 = (
    "pelvis", "left_hip", "right_hip", "spine", "left_knee", "right_knee",
    "spine2", "left_ankle", "right_ankle", "chest", "left_foot", "right_foot",
    "neck", "left_collar", "right_collar", "head", "left_shoulder", "right_shoulder",
    "left_elbow", "right_elbow", "left_wrist", "right_wrist", "left_hand", "right_hand",
)

_PARENT_NAMES = {
    "spine": "pelvis", "chest": "spine", "neck": "chest", "head": "neck",
    "left_hip": "pelvis", "left_knee": "left_hip", "left_ankle": "left_knee",
    "right_hip": "pelvis", "right_knee": "right_hip", "right_ankle": "right_knee",
    "left_shoulder": "chest", "left_elbow": "left_shoulder", "left_wrist": "left_elbow",
    "right_shoulder": "chest", "right_elbow": "right_shoulder", "right_wrist": "right_elbow",
}
_PARENTS_24 = (0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21)

# Rest offsets in meters, y up, body facing +z, arms hanging down.
_OFFSETS_17 = {
    "pelvis": (0.0, 0.0, 0.0),
    "spine": (0.0, 0.12, 0.0),
    "chest": (0.0, 0.22, 0.0),
    "neck": (0.0, 0.20, 0.0),
    "head": (0.0, 0.14, 0.0),
    "left_hip": (0.10, -0.06, 0.0),
    "left_knee": (0.0, -0.42, 0.0),
    "left_ankle": (0.0, -0.40, 0.0),
    "right_hip": (-0.10, -0.06, 0.0),
    "right_knee": (0.0, -0.42, 0.0),
    "right_ankle": (0.0, -0.40, 0.0),
    "left_shoulder": (0.17, 0.16, 0.0),
    "left_elbow": (0.0, -0.28, 0.0),
    "left_wrist": (0.0, -0.25, 0.0),
    "right_shoulder": (-0.17, 0.16, 0.0),
    "right_elbow": (0.0, -0.28, 0.0),
    "right_wrist": (0.0, -0.25, 0.0),
}
_OFFSETS_24 = {
    "pelvis": (0.0, 0.0, 0.0),
    "left_hip": (0.10, -0.06, 0.0), "right_hip": (-0.10, -0.06, 0.0),
    "spine": (0.0, 0.11, 0.0), "left_knee": (0.0, -0.42, 0.0), "right_knee": (0.0, -0.42, 0.0),
    "spine2": (0.0, 0.12, 0.0), "left_ankle": (0.0, -0.40, 0.0), "right_ankle": (0.0, -0.40, 0.0),
    "chest": (0.0, 0.06, 0.02), "left_foot": (0.0, -0.05, 0.12), "right_foot": (0.0, -0.05, 0.12),
    "neck": (0.0, 0.22, -0.02), "left_collar": (0.07, 0.13, 0.0), "right_collar": (-0.07, 0.13, 0.0),
    "head": (0.0, 0.14, 0.03), "left_shoulder": (0.10, 0.03, 0.0), "right_shoulder": (-0.10, 0.03, 0.0),
    "left_elbow": (0.0, -0.28, 0.0), "right_elbow": (0.0, -0.28, 0.0),
    "left_wrist": (0.0, -0.25, 0.0), "right_wrist": (0.0, -0.25, 0.0),
    "left_hand": (0.0, -0.08, 0.0), "right_hand": (0.0, -0.08, 0.0),
}

# Shape coefficient k scales the listed bone groups by coef per unit beta.
_SHAPE_GROUPS = [
    ({"*"}, 0.04),                                                        # overall size
    ({"left_knee", "right_knee", "left_ankle", "right_ankle"}, 0.05),    # leg length
    ({"left_elbow", "right_elbow", "left_wrist", "right_wrist"}, 0.05),  # arm length
    ({"spine", "spine2", "chest", "neck"}, 0.05),                        # torso length
    ({"left_shoulder", "right_shoulder", "left_collar", "right_collar"}, 0.06),  # shoulder width
    ({"left_hip", "right_hip"}, 0.06),                                    # hip width
    ({"head", "neck"}, 0.04),                                             # head and neck
    ({"left_knee", "right_knee"}, 0.03),                                  # thigh
    ({"left_ankle", "right_ankle"}, 0.03),                                # shin
    ({"left_elbow", "right_elbow"}, 0.03),                                # upper arm
]


@dataclass(frozen=True, eq=False)
class KinematicTree:
    """Joint hierarchy with rest offsets (meters) and a bone-length shape basis.

    ``parents[0] == 0`` marks the root; every other joint has ``parents[j] < j``.
    """

    names: tuple
    parents: np.ndarray
    rest_offsets: np.ndarray
    shape_basis: np.ndarray

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        offsets = np.asarray(self.rest_offsets, dtype=np.float64)
        basis = np.asarray(self.shape_basis, dtype=np.float64)
        n = len(self.names)
        if parents.shape != (n,) or offsets.shape != (n, 3) or basis.shape != (n, N_BETAS):
            raise ValueError("tree arrays do not match joint count")
        if parents[0] != 0 or any(parents[j] >= j for j in range(1, n)):
            raise ValueError("parents must be topologically ordered with root at index 0")
        if not np.all(np.isfinite(offsets)):
            raise ValueError("rest offsets must be finite")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_offsets", offsets)
        object.__setattr__(self, "shape_basis", basis)

    @property
    def n_joints(self) -> int:
        return len(self.names)

    @property
    def pose_dim(self) -> int:
        return 3 * (self.n_joints - 1)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def children(self, j: int) -> list[int]:
        return [c for c in range(1, self.n_joints) if self.parents[c] == j]

    def rest_joints(self) -> np.ndarray:
        return forward_kinematics(self, np.zeros(self.pose_dim)).joints

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update("|".join(self.names).encode())
        for arr in (self.parents, self.rest_offsets, self.shape_basis):
            h.update(np.ascontiguousarray(arr).astype("<f8").tobytes())
        return h.hexdigest()[:16]


def _shape_basis(names) -> np.ndarray:
    basis = np.zeros((len(names), N_BETAS))
    for k, (group, coef) in enumerate(_SHAPE_GROUPS):
        for j, name in enumerate(names):
            if j and ("*" in group or name in group):
                basis[j, k] = coef
    return basis


def default_tree(n_joints: int = 17) -> KinematicTree:
    """The 17-joint default body, or the 24-joint SMPL-sized layout."""
    if n_joints == 17:
        names = JOINTS_17
        parents = [0] + [names.index(_PARENT_NAMES[n]) for n in names[1:]]
        offsets = [_OFFSETS_17[n] for n in names]
    elif n_joints == 24:
        names = JOINTS_24
        parents = list(_PARENTS_24)
        offsets = [_OFFSETS_24[n] for n in names]
    else:
        raise ValueError(f"no built-in tree with {n_joints} joints (use 17 or 24)")
    return KinematicTree(tuple(names), np.array(parents), np.array(offsets), _shape_basis(names))


# -- rotations ---------------------------------------------------------------

# skew(w) = w @ _SKEW reshaped to 3x3
_SKEW = np.zeros((3, 9))
_SKEW[2, 1], _SKEW[1, 2] = -1.0, 1.0
_SKEW[2, 3], _SKEW[0, 5] = 1.0, -1.0
_SKEW[1, 6], _SKEW[0, 7] = -1.0, 1.0


def rodrigues(omega):
    """Axis-angle vectors ``(..., 3)`` to rotation matrices ``(..., 3, 3)``.

    Returns a numpy array for array input and a :class:`Tensor` for tensor input.
    """
    if not isinstance(omega, Tensor):
        return rodrigues(Tensor(omega)).data
    angle_sq = omega.square().sum(axis=-1, keepdims=True)
    a, b = rotation_coeffs(angle_sq)
    k = matmul(omega, _SKEW).reshape(omega.shape[:-1] + (3, 3))
    k2 = matmul(k, k)
    a = a.reshape(a.shape + (1,))
    b = b.reshape(b.shape + (1,))
    return k * a + k2 * b + np.eye(3)


def shaped_offsets(tree: KinematicTree, beta):
    """Per-joint offsets ``rest_offset * clip(1 + beta @ basis.T, 0.2, 3.0)``."""
    tensor_in = isinstance(beta, Tensor)
    beta = as_tensor(beta)
    scale = matmul(beta, tree.shape_basis.T) + 1.0
    scale = scale.clip(*SCALE_CLAMP)
    out = scale.reshape(scale.shape + (1,)) * tree.rest_offsets
    return out if tensor_in else out.data


@dataclass
class BodyState:
    """Posed skeleton: world joint positions and rotations, optional mesh."""

    joints: object                  # (..., J, 3)
    rotations: object               # (..., J, 3, 3) world rotation of each joint frame
    local_rotations: object = None  # (..., J, 3, 3) root orientation then per-joint pose
    vertices: object = None         # (..., V, 3) once skinned

    @property
    def transforms(self) -> np.ndarray:
        rot = _np(self.rotations)
        pos = _np(self.joints)
        out = np.zeros(rot.shape[:-2] + (4, 4))
        out[..., :3, :3] = rot
        out[..., :3, 3] = pos
        out[..., 3, 3] = 1.0
        return out


def _np(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _batchify(x, width):
    x = as_tensor(x)
    single = x.ndim == 1
    if single:
        x = x.reshape(1, -1)
    return x.reshape(x.shape[0], width), single


def forward_kinematics(tree: KinematicTree, pose, orient=None, beta=None, root_transl=None) -> BodyState:
    """Pose the skeleton.

    ``pose`` holds one axis-angle per non-root joint, shape ``(3(J-1),)`` or
    ``(B, 3(J-1))``. Joint ``j`` rotates the bones below it:
    ``G_j = G_parent @ R_j`` and ``p_j = p_parent + G_parent @ offset_j``.
    """
    tensor_in = any(isinstance(x, Tensor) for x in (pose, orient, beta, root_transl))
    n = tree.n_joints
    pose, single = _batchify(pose, tree.pose_dim)
    batch = pose.shape[0]
    orient = as_tensor(np.zeros((batch, 3)) if orient is None else orient).reshape(batch, 3)
    beta = as_tensor(np.zeros((batch, N_BETAS)) if beta is None else beta).reshape(batch, N_BETAS)

    local = rodrigues(concat([orient, pose], axis=-1).reshape(batch, n, 3))
    offsets = shaped_offsets(tree, beta)
    base = offsets[:, 0] if root_transl is None else offsets[:, 0] + as_tensor(root_transl).reshape(batch, 3)

    rots = [local[:, 0]]
    pos = [base]
    for j in range(1, n):
        p = tree.parents[j]
        rots.append(matmul(rots[p], local[:, j]))
        pos.append(pos[p] + matmul(rots[p], offsets[:, j].reshape(batch, 3, 1)).reshape(batch, 3))
    joints = stack(pos, axis=1)
    rotations = stack(rots, axis=1)
    if single:
        joints, rotations, local = joints[0], rotations[0], local[0]
    if not tensor_in:
        joints, rotations, local = joints.data, rotations.data, local.data
    return BodyState(joints, rotations, local)


# -- mesh --------------------------------------------------------------------

@dataclass(eq=False)
class MeshTemplate:
    """Rest-pose capsule mesh with skinning weights and a joint regressor."""

    vertices: np.ndarray          # (V, 3)
    faces: np.ndarray             # (F, 3) int
    weights: np.ndarray           # (V, J), rows sum to 1
    rest_joints: np.ndarray       # (J, 3) at beta = 0
    joint_regressor: np.ndarray   # (J, V), rows sum to 1
    ring_size: int = 8
    skipped_bones: list = field(default_factory=list)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)


def _ring_frame(d: np.ndarray):
    u = np.cross(d, [0.0, 0.0, 1.0])
    if np.linalg.norm(u) < 1e-8 * max(np.linalg.norm(d), 1.0):
        u = np.cross(d, [1.0, 0.0, 0.0])
    u = u / np.linalg.norm(u)
    w = np.cross(d / np.linalg.norm(d), u)
    return u, w


def build_template(tree: KinematicTree, rings_per_bone: int = 3, ring_vertices: int = 8,
                   radius: float = 0.05) -> MeshTemplate:
    """Procedural capsule mesh: ``rings_per_bone`` rings per bone, evenly spaced
    from the parent joint (t=0) to the child joint (t=1).

    A vertex on a ring at fraction t is skinned ``1 - t`` to the parent and
    ``t`` to the child. The joint regressor averages the rings that sit on each
    joint, which are rigidly attached to that joint, so it reproduces the
    skeleton's joints exactly for every pose at beta = 0.
    """
    if rings_per_bone < 2 or ring_vertices < 3:
        raise ValueError("need rings_per_bone >= 2 and ring_vertices >= 3")
    rest = tree.rest_joints()
    n = tree.n_joints
    phis = 2 * np.pi * np.arange(ring_vertices) / ring_vertices
    ts = np.linspace(0.0, 1.0, rings_per_bone)
    verts, weights, faces, skipped = [], [], [], []
    ring_centers, ring_members = [], []
    for j in range(1, n):
        p = tree.parents[j]
        d = rest[j] - rest[p]
        if np.linalg.norm(d) < 1e-9:
            skipped.append(tree.names[j])
            continue
        u, w = _ring_frame(d)
        first = len(verts)
        for k, t in enumerate(ts):
            center = rest[p] + t * d
            ring_idx = []
            for phi in phis:
                ring_idx.append(len(verts))
                verts.append(center + radius * (np.cos(phi) * u + np.sin(phi) * w))
                row = np.zeros(n)
                row[p] += 1.0 - t
                row[j] += t
                weights.append(row)
            ring_centers.append(center)
            ring_members.append(ring_idx)
        for k in range(rings_per_bone - 1):
            a0 = first + k * ring_vertices
            b0 = a0 + ring_vertices
            for i in range(ring_vertices):
                i2 = (i + 1) % ring_vertices
                faces.append((a0 + i, b0 + i, b0 + i2))
                faces.append((a0 + i, b0 + i2, a0 + i2))
    if skipped:
        warnings.warn(f"skipped zero-length bones: {skipped}", stacklevel=2)
    verts = np.array(verts)
    weights = np.array(weights)
    centers = np.array(ring_centers)
    regressor = np.zeros((n, len(verts)))
    for j in range(n):
        dist = np.linalg.norm(centers - rest[j], axis=1)
        nearest = np.flatnonzero(dist <= dist.min() + 1e-9)
        idx = np.concatenate([ring_members[r] for r in nearest])
        regressor[j, idx] = 1.0 / len(idx)
    return MeshTemplate(verts, np.array(faces, dtype=np.int64).reshape(-1, 3), weights, rest,
                        regressor, ring_vertices, skipped)


def lbs(template: MeshTemplate, state: BodyState):
    """Linear blend skinning: ``v' = sum_j w_vj (G_j (v - c_j) + p_j)``."""
    tensor_in = isinstance(state.joints, Tensor)
    rots, joints = as_tensor(state.rotations), as_tensor(state.joints)
    single = joints.ndim == 2
    if single:
        rots, joints = rots.reshape((1,) + rots.shape), joints.reshape((1,) + joints.shape)
    batch, n = joints.shape[0], joints.shape[1]
    if template.weights.shape[1] != n:
        raise ValueError(f"template has {template.weights.shape[1]} joints, state has {n}")
    trans = joints - matmul(rots, template.rest_joints.reshape(n, 3, 1)).reshape(batch, n, 3)
    blend_rot = matmul(template.weights, rots.reshape(batch, n, 9)).reshape(batch, -1, 3, 3)
    blend_trans = matmul(template.weights, trans)
    verts = matmul(blend_rot, template.vertices.reshape(-1, 3, 1)).reshape(batch, -1, 3) + blend_trans
    if single:
        verts = verts[0]
    return verts if tensor_in else verts.data


def regress_joints(template: MeshTemplate, vertices):
    """Joints as fixed linear combinations of mesh vertices, ``W @ M``."""
    if _np(vertices).shape[-2] != template.n_vertices:
        raise ValueError("vertex count does not match template")
    return matmul(template.joint_regressor, vertices) if isinstance(vertices, Tensor) \
        else template.joint_regressor @ vertices


def export_obj(path, vertices: np.ndarray, faces: np.ndarray) -> None:
    """Write a Wavefront OBJ with 1-based face indices."""
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def wrap_axis_angle(omega: np.ndarray) -> np.ndarray:
    """Map axis-angle vectors to the same rotation with norm in [0, pi]."""
    omega = np.asarray(omega, dtype=np.float64)
    flat = omega.reshape(-1, 3)
    angle = np.linalg.norm(flat, axis=1)
    out = flat.copy()
    big = angle > np.pi
    if np.any(big):
        axis = flat[big] / angle[big, None]
        wrapped = np.mod(angle[big] + np.pi, 2 * np.pi) - np.pi
        out[big] = axis * wrapped[:, None]
    return out.reshape(omega.shape)
