"""Linear-blend-skinned parametric body model.

``forward`` maps a 6D pose vector and shape coefficients to a posed mesh and
regressed joints. Guidance only needs the regressed joints, so
:class:`JointMap` precomputes everything that depends on the shape alone and
evaluates joints and their pose Jacobian without touching the vertices.
"""
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import DimensionMismatch, FormatError, InvariantViolation
from .rotation import d_rot6d_to_matrix, rot6d_to_matrix

FORMAT_VERSION = 1
ARRAY_NAMES = (
    "template_vertices",
    "shape_dirs",
    "pose_dirs",
    "skin_weights",
    "kinematic_parents",
    "joint_template_regressor",
    "joint_regressor_W",
    "faces",
)
OPTIONAL_ARRAYS = ("pose_dirs", "faces")
MAX_ABS_SHAPE = 10.0


@dataclass(eq=False)
class BodyModel:
    template_vertices: np.ndarray  # (N, 3)
    shape_dirs: np.ndarray  # (N, 3, B)
    skin_weights: np.ndarray  # (N, J)
    kinematic_parents: np.ndarray  # (J,), parents[0] == -1
    joint_template_regressor: np.ndarray  # (J, N)
    joint_regressor_W: np.ndarray  # (K, N)
    pose_dirs: np.ndarray | None = None  # (N, 3, 9 * (J - 1))
    faces: np.ndarray | None = None  # (F, 3) int
    _joint_maps: dict = field(default_factory=dict, repr=False)

    @property
    def n_vertices(self):
        return self.template_vertices.shape[0]

    @property
    def n_joints(self):
        return self.kinematic_parents.shape[0]

    @property
    def n_shape(self):
        return self.shape_dirs.shape[2]

    @property
    def n_reported(self):
        return self.joint_regressor_W.shape[0]

    @property
    def pose_dim(self):
        return 6 * self.n_joints

    def arrays(self):
        out = {name: getattr(self, name) for name in ARRAY_NAMES}
        return {k: v for k, v in out.items() if v is not None}

    def __eq__(self, other):
        if not isinstance(other, BodyModel):
            return NotImplemented
        a, b = self.arrays(), other.arrays()
        return a.keys() == b.keys() and all(
            a[k].shape == b[k].shape and np.array_equal(a[k], b[k]) for k in a
        )

    def digest(self):
        h = hashlib.sha256()
        for name, arr in sorted(self.arrays().items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()

    def validate(self):
        validate_model(self)
        return self

    def joint_map(self, shape=None):
        """Cached :class:`JointMap` for the given shape coefficients."""
        beta = check_shape(self, shape)
        key = beta.tobytes()
        jm = self._joint_maps.get(key)
        if jm is None:
            if len(self._joint_maps) > 64:
                self._joint_maps.clear()
            jm = self._joint_maps[key] = JointMap(self, beta)
        return jm


@dataclass
class MeshPose:
    vertices: np.ndarray
    joints3d: np.ndarray


def check_shape(model, shape):
    if shape is None:
        return np.zeros(model.n_shape)
    beta = np.asarray(shape, dtype=np.float64).reshape(-1)
    if beta.shape[0] != model.n_shape:
        raise DimensionMismatch(f"shape has {beta.shape[0]} coefficients, model expects {model.n_shape}")
    if not np.all(np.isfinite(beta)) or np.any(np.abs(beta) > MAX_ABS_SHAPE):
        raise InvariantViolation(f"shape coefficients must be finite with |beta| <= {MAX_ABS_SHAPE}")
    return beta


def _pose_matrices(model, pose):
    pose = np.asarray(pose, dtype=np.float64)
    single = pose.ndim == 1
    pose = np.atleast_2d(pose)
    if pose.shape[-1] != model.pose_dim:
        raise DimensionMismatch(f"pose has {pose.shape[-1]} entries, model expects {model.pose_dim}")
    r6 = pose.reshape(pose.shape[0], model.n_joints, 6)
    return single, r6, rot6d_to_matrix(r6)


def _pose_features(R):
    n, J = R.shape[:2]
    return (R[:, 1:] - np.eye(3)).reshape(n, 9 * (J - 1))


class JointMap:
    """Regressed joints as an explicit function of the local rotations.

    For fixed shape, ``joints[k] = sum_j Rg_j P[k, j] + s[k, j] tg_j`` where
    ``Rg_j, tg_j`` are the global rotation/position of joint ``j``.
    """

    def __init__(self, model, beta):
        self.model = model
        self.beta = beta
        v = model.template_vertices + model.shape_dirs @ beta
        self.rest_joints = model.joint_template_regressor @ v
        self.parents = np.asarray(model.kinematic_parents, dtype=np.int64)
        w, W = model.skin_weights, model.joint_regressor_W
        self.s = W @ w
        Ww = W[:, :, None] * w[None]  # (K, N, J)
        self.P = (np.einsum("kij,ia->kja", Ww, v) - self.s[:, :, None] * self.rest_joints[None])[None]
        self.Q = None
        if model.pose_dirs is not None:
            self.Q = np.einsum("kij,iaf->kjaf", Ww, model.pose_dirs, optimize=True)

    def _effective_P(self, R):
        if self.Q is None:
            return self.P
        return self.P + np.einsum("kjaf,nf->nkja", self.Q, _pose_features(R))

    def joints(self, pose, backend=None):
        """``(..., 6J)`` pose -> ``(..., K, 3)`` joints."""
        kern = backend or kernels.get()
        single, _, R = _pose_matrices(self.model, pose)
        Rg, tg = kern.chain(self.parents, self.rest_joints, R)
        out = kern.regress_joints(Rg, tg, self._effective_P(R), self.s)
        return out[0] if single else out

    def joints_and_jacobian(self, pose, backend=None):
        """Joints ``(n, K, 3)`` and Jacobian ``(n, 3K, 6J)`` w.r.t. the 6D pose."""
        kern = backend or kernels.get()
        single, r6, R = _pose_matrices(self.model, pose)
        n, J = R.shape[:2]
        D = d_rot6d_to_matrix(r6, flat=False)
        Rg, tg = kern.chain(self.parents, self.rest_joints, R)
        P = self._effective_P(R)
        joints = kern.regress_joints(Rg, tg, P, self.s)
        jac = kern.pose_jacobian(self.parents, Rg, tg, P, self.s, D)
        if self.Q is not None:
            K = self.s.shape[0]
            RgQ = np.einsum("njab,kjbf->nkaf", Rg, self.Q).reshape(n, K, 3, J - 1, 3, 3)
            jac[:, :, :, 1:] += np.einsum("nkimab,nmabq->nkimq", RgQ, D[:, 1:])
        jac = jac.reshape(n, 3 * jac.shape[1], 6 * J)
        if single:
            return joints[0], jac[0]
        return joints, jac


def forward(model, pose, shape=None, backend=None):
    """Posed mesh and regressed joints for ``pose`` (``(6J,)`` or ``(n, 6J)``)."""
    kern = backend or kernels.get()
    beta = check_shape(model, shape)
    single, _, R = _pose_matrices(model, pose)
    n = R.shape[0]
    v = model.template_vertices + model.shape_dirs @ beta
    rest_joints = model.joint_template_regressor @ v
    verts = np.broadcast_to(v, (n,) + v.shape)
    if model.pose_dirs is not None:
        verts = verts + np.einsum("iaf,nf->nia", model.pose_dirs, _pose_features(R))
    Rg, tg = kern.chain(model.kinematic_parents, rest_joints, R)
    posed = kern.skin(Rg, tg, rest_joints, model.skin_weights, verts)
    joints = np.einsum("ki,nia->nka", model.joint_regressor_W, posed)
    if single:
        return MeshPose(posed[0], joints[0])
    return MeshPose(posed, joints)


def joints_jacobian_wrt_pose(model, pose, shape=None, backend=None):
    """Jacobian ``(3K, 6J)`` (or batched) of the regressed joints w.r.t. the 6D pose."""
    return model.joint_map(shape).joints_and_jacobian(pose, backend=backend)[1]


def identity_pose(n_joints=24):
    return np.tile([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], n_joints)


# ---------------------------------------------------------------- validation


def validate_parents(parents):
    parents = np.asarray(parents)
    if parents.ndim != 1 or parents.shape[0] < 1:
        raise InvariantViolation("kinematic_parents must be a non-empty 1D array")
    if parents[0] != -1:
        raise InvariantViolation("kinematic_parents[0] must be -1 (root has no parent)")
    for j in range(1, len(parents)):
        p = parents[j]
        if p < 0 or p >= j:
            raise InvariantViolation(
                f"kinematic_parents[{j}] = {p}: parent index must precede its child (cycle or forward reference)"
            )


def validate_model(m):
    N = m.template_vertices.shape[0]
    J = m.kinematic_parents.shape[0]
    expect = {
        "template_vertices": (N, 3),
        "skin_weights": (N, J),
        "joint_template_regressor": (J, N),
    }
    for name, shp in expect.items():
        if getattr(m, name).shape != shp:
            raise FormatError(f"{name}: shape {getattr(m, name).shape}, expected {shp}")
    if m.shape_dirs.ndim != 3 or m.shape_dirs.shape[:2] != (N, 3):
        raise FormatError(f"shape_dirs: shape {m.shape_dirs.shape}, expected ({N}, 3, B)")
    if m.joint_regressor_W.ndim != 2 or m.joint_regressor_W.shape[1] != N:
        raise FormatError(f"joint_regressor_W: shape {m.joint_regressor_W.shape}, expected (K, {N})")
    if m.pose_dirs is not None and m.pose_dirs.shape != (N, 3, 9 * (J - 1)):
        raise FormatError(f"pose_dirs: shape {m.pose_dirs.shape}, expected ({N}, 3, {9 * (J - 1)})")
    if m.faces is not None and (m.faces.ndim != 2 or m.faces.shape[1] != 3):
        raise FormatError(f"faces: shape {m.faces.shape}, expected (F, 3)")
    for name, arr in m.arrays().items():
        if not np.all(np.isfinite(arr)):
            raise InvariantViolation(f"{name} contains non-finite values")
    validate_parents(m.kinematic_parents)
    w = m.skin_weights
    if np.any(w < 0):
        i = int(np.argwhere(w < 0)[0, 0])
        raise InvariantViolation(f"skin_weights row {i} has negative entries")
    bad = np.flatnonzero(np.abs(w.sum(axis=1) - 1.0) > 1e-6)
    if bad.size:
        i = int(bad[0])
        raise InvariantViolation(f"skin_weights row {i} sums to {w[i].sum():.6g}, expected 1")
    if m.faces is not None and (m.faces.min(initial=0) < 0 or m.faces.max(initial=0) >= N):
        raise InvariantViolation("faces reference vertices out of range")


# ------------------------------------------------------------------ container


def save_model(model, path, binary=True):
    """Write the JSON container; with ``binary`` arrays go to ``<stem>.bin``."""
    path = Path(path)
    arrays = model.arrays()
    header = {
        "format_version": FORMAT_VERSION,
        "kind": "body_model",
        "endianness": "little",
        "counts": {
            "n_vertices": model.n_vertices,
            "n_joints": model.n_joints,
            "n_shape": model.n_shape,
            "n_reported_joints": model.n_reported,
            "has_pose_dirs": model.pose_dirs is not None,
        },
        "arrays": {},
    }
    blob = bytearray()
    for name, arr in arrays.items():
        data = np.ascontiguousarray(arr, dtype="<f8")
        entry = {"shape": list(arr.shape)}
        if binary:
            entry["offset"] = len(blob)
            entry["count"] = int(data.size)
            blob += data.tobytes()
        else:
            entry["data"] = data.tolist()
        header["arrays"][name] = entry
    if binary:
        blob_path = path.with_suffix(".bin")
        header["blob"] = blob_path.name
        blob_path.write_bytes(bytes(blob))
    path.write_text(json.dumps(header))
    return path


def load_model(path):
    path = Path(path)
    try:
        header = json.loads(path.read_text())
    except (OSError, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: cannot parse model container: {exc}") from exc
    if not isinstance(header, dict):
        raise FormatError(f"{path}: top level must be an object")
    if header.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: format_version: unsupported {header.get('format_version')!r}")
    if header.get("endianness", "little") != "little":
        raise FormatError(f"{path}: endianness: only 'little' is supported")
    entries = header.get("arrays")
    if not isinstance(entries, dict):
        raise FormatError(f"{path}: arrays: missing or not an object")
    unknown = set(entries) - set(ARRAY_NAMES)
    if unknown:
        raise FormatError(f"{path}: arrays: unknown names {sorted(unknown)}")
    blob = None
    if "blob" in header:
        try:
            blob = (path.parent / header["blob"]).read_bytes()
        except OSError as exc:
            raise FormatError(f"{path}: blob: {exc}") from exc
    arrays = {}
    for name in ARRAY_NAMES:
        if name not in entries:
            if name in OPTIONAL_ARRAYS:
                continue
            raise FormatError(f"{path}: arrays.{name}: missing")
        arrays[name] = _read_array(path, name, entries[name], blob)
    ints = {"kinematic_parents", "faces"}
    for name in ints & arrays.keys():
        a = arrays[name]
        if not np.array_equal(a, np.round(a)):
            raise FormatError(f"{path}: arrays.{name}: expected integer values")
        arrays[name] = a.astype(np.int64)
    model = BodyModel(**arrays)
    validate_model(model)
    return model


def _read_array(path, name, entry, blob):
    where = f"{path}: arrays.{name}"
    if not isinstance(entry, dict) or "shape" not in entry:
        raise FormatError(f"{where}: expected object with 'shape'")
    shape = tuple(int(s) for s in entry["shape"])
    size = int(np.prod(shape)) if shape else 1
    if "data" in entry:
        try:
            arr = np.asarray(entry["data"], dtype=np.float64)
        except (TypeError, ValueError) as exc:
            raise FormatError(f"{where}.data: {exc}") from exc
        if arr.shape != shape:
            raise FormatError(f"{where}.data: shape {arr.shape} does not match declared {shape}")
        return arr
    if blob is None:
        raise FormatError(f"{where}: offset given but container has no blob")
    offset = int(entry.get("offset", -1))
    count = int(entry.get("count", size))
    if offset < 0 or count != size or offset + 8 * count > len(blob):
        raise FormatError(f"{where}: offset/count out of range of blob ({len(blob)} bytes)")
    return np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)


def write_obj(path, vertices, faces=None):
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices)]
    if faces is not None:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces, dtype=int)]
    Path(path).write_text("\n".join(lines) + "\n")


# ------------------------------------------------------------------ toy model

SMPL_PARENTS = [-1, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19, 20, 21]
# rest joint locations of a roughly 1.65 m humanoid, y up, facing +z
HUMANOID_JOINTS = np.array(
    [
        [0.00, 0.00, 0.00],
        [0.06, -0.09, 0.00],
        [-0.06, -0.09, 0.00],
        [0.00, 0.11, -0.02],
        [0.10, -0.47, 0.01],
        [-0.10, -0.47, 0.01],
        [0.00, 0.25, -0.01],
        [0.09, -0.87, -0.03],
        [-0.09, -0.87, -0.03],
        [0.00, 0.30, 0.01],
        [0.11, -0.93, 0.10],
        [-0.11, -0.93, 0.10],
        [0.00, 0.52, -0.01],
        [0.08, 0.42, -0.01],
        [-0.08, 0.42, -0.01],
        [0.00, 0.60, 0.04],
        [0.18, 0.45, -0.02],
        [-0.18, 0.45, -0.02],
        [0.44, 0.43, -0.03],
        [-0.44, 0.43, -0.03],
        [0.70, 0.44, -0.02],
        [-0.70, 0.44, -0.02],
        [0.78, 0.44, -0.03],
        [-0.78, 0.44, -0.03],
    ]
)


def _wendland(d, support):
    q = np.clip(d / support, 0.0, 1.0)
    return (1.0 - q) ** 4 * (4.0 * q + 1.0)


def _segment_distance(points, a, b):
    ab = b - a
    t = np.clip(((points - a) @ ab) / max(ab @ ab, 1e-12), 0.0, 1.0)
    return np.linalg.norm(points - (a + t[:, None] * ab), axis=1)


def make_toy_model(n_joints=24, n_vertices_per_segment=10, seed=0, n_shape=2):
    """Deterministic desk-scale body model.

    ``n_joints == 24`` gives a humanoid tree with SMPL's kinematic layout;
    any other count gives a straight chain along +y. Each joint owns
    ``n_vertices_per_segment`` vertices arranged in rings around the bone it
    rotates. Skin weights use a compactly supported falloff, so vertices far
    from neighbouring bones are rigidly attached to a single joint.
    """
    if n_joints < 2:
        raise ValueError("n_joints must be >= 2")
    rng = np.random.default_rng(seed)
    if n_joints == 24:
        parents = np.array(SMPL_PARENTS)
        joints = HUMANOID_JOINTS.copy()
        radius = np.full(24, 0.045)
        radius[[0, 3, 6, 9]] = 0.07
        radius[[1, 2, 4, 5]] = 0.055
    else:
        parents = np.arange(-1, n_joints - 1)
        joints = np.zeros((n_joints, 3))
        joints[:, 1] = 0.3 * np.arange(n_joints)
        radius = np.full(n_joints, 0.045)
    J = n_joints
    children = [[] for _ in range(J)]
    for j in range(1, J):
        children[parents[j]].append(j)

    seg_end = np.empty((J, 3))
    for j in range(J):
        if children[j]:
            seg_end[j] = joints[children[j]].mean(axis=0)
        else:
            d = joints[j] - joints[parents[j]]
            seg_end[j] = joints[j] + (0.15 if J == 24 else 0.3) * d / np.linalg.norm(d)
    # the root segment of the humanoid should cover the pelvis, not point up the spine
    if J == 24:
        seg_end[0] = joints[0] + np.array([0.0, -0.06, 0.0])

    n_seg = n_vertices_per_segment
    if n_seg >= 6 and n_seg % 2 == 0:
        ring_size, fractions = n_seg // 2, (0.25, 0.75)
    else:
        ring_size, fractions = n_seg, (0.5,)

    verts, owner, faces = [], [], []
    for j in range(J):
        a, b = joints[j], seg_end[j]
        axis = b - a
        axis /= np.linalg.norm(axis)
        helper = np.array([1.0, 0.0, 0.0]) if abs(axis[0]) < 0.9 else np.array([0.0, 0.0, 1.0])
        e1 = np.cross(axis, helper)
        e1 /= np.linalg.norm(e1)
        e2 = np.cross(axis, e1)
        phase = rng.uniform(0, 2 * np.pi)
        base = len(verts)
        for f in fractions:
            centre = a + f * (b - a)
            for k in range(ring_size):
                ang = phase + 2 * np.pi * k / ring_size
                r = radius[j] * rng.uniform(0.9, 1.1)
                verts.append(centre + r * (np.cos(ang) * e1 + np.sin(ang) * e2))
                owner.append(j)
        if len(fractions) == 2:
            for k in range(ring_size):
                k2 = (k + 1) % ring_size
                p0, p1 = base + k, base + k2
                q0, q1 = base + ring_size + k, base + ring_size + k2
                faces += [(p0, p1, q1), (p0, q1, q0)]
    verts = np.array(verts)
    owner = np.array(owner)
    N = len(verts)

    support = 0.12
    dist = np.stack([_segment_distance(verts, joints[j], seg_end[j]) for j in range(J)], axis=1)
    w = _wendland(dist, support)
    w[np.arange(N), owner] = np.maximum(w[np.arange(N), owner], 1e-3)
    w /= w.sum(axis=1, keepdims=True)

    shape_dirs = np.zeros((N, 3, n_shape))
    if n_shape >= 1:
        shape_dirs[:, :, 0] = 0.05 * (verts - joints[0])
    if n_shape >= 2:
        # girth: push vertices away from their own bone
        radial = np.empty_like(verts)
        for i in range(N):
            a, b = joints[owner[i]], seg_end[owner[i]]
            ab = b - a
            t = np.clip((verts[i] - a) @ ab / (ab @ ab), 0, 1)
            rr = verts[i] - (a + t * ab)
            radial[i] = rr / max(np.linalg.norm(rr), 1e-9)
        shape_dirs[:, :, 1] = 0.01 * radial
    for b_ in range(2, n_shape):
        shape_dirs[:, :, b_] = 0.005 * rng.standard_normal((N, 3))

    Jt = _affine_regressor(verts, joints, n_near=8)
    model = BodyModel(
        template_vertices=verts,
        shape_dirs=shape_dirs,
        skin_weights=w,
        kinematic_parents=parents.astype(np.int64),
        joint_template_regressor=Jt,
        joint_regressor_W=Jt.copy(),
        faces=np.array(faces, dtype=np.int64) if faces else None,
    )
    return model.validate()


def _affine_regressor(verts, joints, n_near=8):
    """Minimum-norm affine weights over the nearest vertices reproducing each joint."""
    W = np.zeros((len(joints), len(verts)))
    for j, p in enumerate(joints):
        idx = np.argsort(np.linalg.norm(verts - p, axis=1))[:n_near]
        M = np.vstack([verts[idx].T, np.ones(len(idx))])
        rhs = np.append(p, 1.0)
        W[j, idx] = M.T @ np.linalg.solve(M @ M.T, rhs)
    return W
