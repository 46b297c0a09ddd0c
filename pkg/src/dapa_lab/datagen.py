"""Synthetic pose corpora, source/target domains and observation synthesis.

Every sample is generated from its own RNG stream keyed by
``(seed, domain code, index)``, so datasets are reproducible bit for bit and
independent of generation order.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .body import (N_BETAS, KinematicTree, MeshTemplate, default_tree, forward_kinematics, lbs,
                   wrap_axis_angle)
from .camera import project

SILHOUETTE_SIZE = 64
FORMAT_NAME = "dapa-lab-dataset"
FORMAT_VERSION = 1


class SupervisionError(PermissionError):
    """Adaptation code asked a target sample for labels it must not see."""


class SchemaError(ValueError):
    """Keypoint or dataset file violates the documented schema."""


# -- pose clusters -------------------------------------------------------------

@dataclass
class PoseCluster:
    name: str
    mean: np.ndarray      # (pose_dim,)
    jitter: np.ndarray    # (pose_dim,) radians
    weight: float = 1.0

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64)
        self.jitter = np.broadcast_to(np.asarray(self.jitter, dtype=np.float64), self.mean.shape).copy()
        if np.any(self.jitter < 0):
            raise ValueError(f"cluster {self.name}: jitter must be nonnegative")


# Mean rotations per joint role. Hip/knee/shoulder/elbow flexion are rotations
# about x: negative swings a limb forward (+z), positive backward.
_CLUSTER_POSES = {
    "standing": {
        "left_shoulder": (0.0, 0.0, 0.15), "right_shoulder": (0.0, 0.0, -0.15),
    },
    "walking": {
        "left_hip": (-0.45, 0.0, 0.0), "right_hip": (0.35, 0.0, 0.0),
        "left_knee": (0.35, 0.0, 0.0), "right_knee": (0.7, 0.0, 0.0),
        "left_shoulder": (0.35, 0.0, 0.1), "right_shoulder": (-0.4, 0.0, -0.1),
        "left_elbow": (-0.2, 0.0, 0.0), "right_elbow": (-0.5, 0.0, 0.0),
    },
    "sitting": {
        "spine": (-0.1, 0.0, 0.0),
        "left_hip": (-1.5, 0.0, 0.12), "right_hip": (-1.5, 0.0, -0.12),
        "left_knee": (1.5, 0.0, 0.0), "right_knee": (1.5, 0.0, 0.0),
        "left_shoulder": (-0.35, 0.0, 0.1), "right_shoulder": (-0.35, 0.0, -0.1),
        "left_elbow": (-0.9, 0.0, 0.0), "right_elbow": (-0.9, 0.0, 0.0),
    },
    "kneeling": {
        "spine": (-0.15, 0.0, 0.0),
        "left_hip": (-0.3, 0.0, 0.1), "right_hip": (-0.3, 0.0, -0.1),
        "left_knee": (1.8, 0.0, 0.0), "right_knee": (1.8, 0.0, 0.0),
        "left_shoulder": (-0.6, 0.0, 0.15), "right_shoulder": (-0.6, 0.0, -0.15),
        "left_elbow": (-0.7, 0.0, 0.0), "right_elbow": (-0.7, 0.0, 0.0),
    },
    "lying": {
        "left_hip": (-0.2, 0.0, 0.2), "right_hip": (-0.9, 0.0, -0.1),
        "right_knee": (1.2, 0.0, 0.0),
        "left_shoulder": (0.0, 0.0, 2.6), "right_shoulder": (0.0, 0.0, -2.6),
        "left_elbow": (-0.3, 0.0, 0.0), "right_elbow": (-0.3, 0.0, 0.0),
    },
}

CORPUS_WEIGHTS = {"standing": 0.35, "walking": 0.35, "sitting": 0.1, "kneeling": 0.1, "lying": 0.1}
# target poses are rare in the source, not absent
SOURCE_WEIGHTS = {"standing": 0.78, "walking": 0.2, "sitting": 0.01, "kneeling": 0.01}
TARGET_WEIGHTS = {"sitting": 0.45, "kneeling": 0.45, "standing": 0.1}

_LEAF_ROLES = {"head", "left_ankle", "right_ankle", "left_wrist", "right_wrist",
               "left_foot", "right_foot", "left_hand", "right_hand"}


def default_clusters(tree: KinematicTree, jitter: float = 0.08, leaf_jitter: float = 0.03,
                     weights: dict | None = None) -> list[PoseCluster]:
    weights = CORPUS_WEIGHTS if weights is None else weights
    out = []
    for name, spec in _CLUSTER_POSES.items():
        mean = np.zeros((tree.n_joints - 1, 3))
        jit = np.full((tree.n_joints - 1, 3), jitter)
        for j, role in enumerate(tree.names[1:]):
            if role in spec:
                mean[j] = spec[role]
            if role in _LEAF_ROLES:
                jit[j] = leaf_jitter
        out.append(PoseCluster(name, mean.reshape(-1), jit.reshape(-1), weights.get(name, 0.0)))
    return out


def _normalized(weights: np.ndarray) -> np.ndarray:
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0) or weights.sum() <= 0:
        raise ValueError("cluster weights must be nonnegative with positive sum")
    return weights / weights.sum()


def _draw_pose(clusters, probs, rng) -> tuple[np.ndarray, int]:
    k = int(rng.choice(len(clusters), p=probs))
    c = clusters[k]
    pose = c.mean + c.jitter * rng.standard_normal(c.mean.shape)
    return wrap_axis_angle(pose.reshape(-1, 3)).reshape(-1), k


@dataclass
class PoseCorpus:
    poses: np.ndarray          # (n, pose_dim)
    labels: np.ndarray         # (n,) cluster index
    cluster_names: list[str]

    def __len__(self):
        return len(self.poses)

    def split(self, holdout: float, seed: int = 0) -> tuple["PoseCorpus", "PoseCorpus"]:
        order = np.random.default_rng(seed).permutation(len(self))
        cut = len(self) - int(round(holdout * len(self)))
        a, b = order[:cut], order[cut:]
        return (PoseCorpus(self.poses[a], self.labels[a], self.cluster_names),
                PoseCorpus(self.poses[b], self.labels[b], self.cluster_names))


def make_pose_corpus(clusters: list[PoseCluster], n: int, seed: int = 0) -> PoseCorpus:
    """Draw ``n`` poses from the cluster mixture (mean + Gaussian jitter, wrapped)."""
    if n < 1:
        raise ValueError("corpus size must be at least 1")
    probs = _normalized([c.weight for c in clusters])
    poses, labels = [], []
    for i in range(n):
        pose, k = _draw_pose(clusters, probs, np.random.default_rng([seed, 7, i]))
        poses.append(pose)
        labels.append(k)
    return PoseCorpus(np.array(poses), np.array(labels), [c.name for c in clusters])


# -- observations ------------------------------------------------------------

@dataclass
class NoiseSpec:
    """Detection-noise model: Gaussian jitter, random dropout, confidence from jitter size."""

    jitter_std: float = 0.0
    dropout: float = 0.0
    conf_cap: float = 0.1

    def __post_init__(self):
        if self.jitter_std < 0 or not (0.0 <= self.dropout <= 1.0) or self.conf_cap <= 0:
            raise ValueError("invalid noise parameters")


def synthesize_observation(gt2d: np.ndarray, noise: NoiseSpec, rng: np.random.Generator) -> np.ndarray:
    """Noisy detections ``(K, 3)`` of clean keypoints ``(K, 2)``.

    Dropped keypoints become ``(0, 0, 0)``; kept ones get confidence
    ``clip(1 - |jitter| / conf_cap, 0.3, 1)``.
    """
    gt2d = np.asarray(gt2d, dtype=np.float64)
    k = len(gt2d)
    jitter = noise.jitter_std * rng.standard_normal((k, 2))
    dropped = rng.random(k) < noise.dropout
    conf = np.clip(1.0 - np.linalg.norm(jitter, axis=1) / noise.conf_cap, 0.3, 1.0)
    out = np.concatenate([gt2d + jitter, conf[:, None]], axis=1)
    out[dropped] = 0.0
    return out


def rasterize_silhouette(points2d: np.ndarray, faces: np.ndarray, size: int = SILHOUETTE_SIZE) -> np.ndarray:
    """Binary ``size x size`` mask of triangles given in [-1, 1] image coordinates (y up)."""
    centers = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    px, py = np.meshgrid(centers, centers[::-1])
    px, py = px.ravel(), py.ravel()
    mask = np.zeros(size * size, dtype=bool)
    tri = points2d[faces]                                   # (F, 3, 2)
    lo = tri.min(axis=1)
    hi = tri.max(axis=1)
    for t, a, b in zip(tri, lo, hi):
        sel = np.flatnonzero((px >= a[0]) & (px <= b[0]) & (py >= a[1]) & (py <= b[1]))
        if not len(sel):
            continue
        x, y = px[sel], py[sel]
        (x0, y0), (x1, y1), (x2, y2) = t
        d = (y1 - y2) * (x0 - x2) + (x2 - x1) * (y0 - y2)
        if abs(d) < 1e-14:
            continue
        l0 = ((y1 - y2) * (x - x2) + (x2 - x1) * (y - y2)) / d
        l1 = ((y2 - y0) * (x - x2) + (x0 - x2) * (y - y2)) / d
        inside = (l0 >= 0) & (l1 >= 0) & (l0 + l1 <= 1)
        mask[sel[inside]] = True
    return mask.reshape(size, size).astype(np.float64)


def observation_vector(modality: str, keypoints: np.ndarray, vertices2d: np.ndarray | None = None,
                       template: MeshTemplate | None = None) -> np.ndarray:
    if modality == "keypoints2d":
        return np.asarray(keypoints, dtype=np.float64).reshape(-1).copy()
    if modality == "silhouette":
        if vertices2d is None or template is None:
            raise ValueError("silhouette observations need projected vertices and a template")
        return rasterize_silhouette(vertices2d, template.faces).reshape(-1)
    raise ValueError(f"unknown observation modality {modality!r}")


def observation_dim(modality: str, n_keypoints: int) -> int:
    return 3 * n_keypoints if modality == "keypoints2d" else SILHOUETTE_SIZE ** 2


# -- samples and datasets -------------------------------------------------------

PARAM_KEYS = ("pose", "orient", "beta", "cam")


@dataclass(eq=False)
class Sample:
    """One person: observation plus annotations.

    ``keypoints`` (K, 3) is the 2D annotation adaptation may use. For target
    samples every other label lives in ``_hidden`` and is only reachable
    through :meth:`eval_targets`.
    """

    id: str
    domain: str
    observation: np.ndarray
    keypoints: np.ndarray
    modality: str = "keypoints2d"
    _hidden: dict = field(default_factory=dict, repr=False)

    @property
    def is_target(self) -> bool:
        return self.domain.startswith("target")

    def supervision(self) -> dict:
        """Training-facing labels: 2D only for target samples."""
        out = {"keypoints": self.keypoints}
        if self.is_target:
            return out
        out.update({k: v for k, v in self._hidden.items() if k in ("joints3d", "joints2d") + PARAM_KEYS})
        return out

    def params(self) -> dict:
        if self.is_target:
            raise SupervisionError(f"sample {self.id}: target samples expose 2D keypoints only")
        return {k: self._hidden[k] for k in PARAM_KEYS}

    def eval_targets(self) -> dict:
        """Evaluation-facing labels (clean 2D, 3D joints, parameters) when present."""
        return dict(self._hidden)

    def has_eval_labels(self) -> bool:
        return "joints3d" in self._hidden


@dataclass
class Dataset:
    samples: list[Sample]
    fingerprint: str = ""
    seed: int = 0

    def __len__(self):
        return len(self.samples)

    def __getitem__(self, i):
        return self.samples[i]

    def __iter__(self):
        return iter(self.samples)

    @property
    def modality(self) -> str:
        return self.samples[0].modality if self.samples else "keypoints2d"

    def subset(self, idx) -> "Dataset":
        return Dataset([self.samples[i] for i in idx], self.fingerprint, self.seed)

    # adaptation-facing accessors
    def observations(self) -> np.ndarray:
        return np.stack([s.observation for s in self.samples])

    def keypoints(self) -> np.ndarray:
        return np.stack([s.keypoints for s in self.samples])

    def param_matrix(self) -> dict:
        rows = [s.params() for s in self.samples]
        return {k: np.stack([r[k] for r in rows]) for k in PARAM_KEYS}

    # evaluation-facing accessors
    def eval_array(self, key: str) -> np.ndarray:
        return np.stack([s.eval_targets()[key] for s in self.samples])


@dataclass
class DomainSpec:
    name: str = "source"
    cluster_weights: dict = field(default_factory=lambda: dict(SOURCE_WEIGHTS))
    n_samples: int = 5000
    seed: int = 0
    shape_std: float = 1.0
    yaw_range: float = 0.9
    tilt_std: float = 0.08
    scale_range: tuple = (0.9, 1.1)
    trans_range: float = 0.08
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    jitter: float = 0.08
    modality: str = "keypoints2d"

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseSpec(**self.noise)
        self.scale_range = tuple(self.scale_range)
        if self.n_samples < 0 or self.shape_std < 0 or self.jitter < 0:
            raise ValueError("invalid domain spec")
        _normalized(list(self.cluster_weights.values()))

    def fingerprint(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True, default=float)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def default_specs(seed: int = 0, n_source: int = 5000, n_target: int = 2000, n_test: int = 500) -> dict:
    """Source (standing/walking, clean lab detections) and target (sitting/kneeling, noisy detections)."""
    source = DomainSpec("source", dict(SOURCE_WEIGHTS), n_source, seed,
                        noise=NoiseSpec(jitter_std=0.005, dropout=0.0))
    target_noise = NoiseSpec(jitter_std=0.02, dropout=0.05, conf_cap=0.08)
    target = DomainSpec("target_train", dict(TARGET_WEIGHTS), n_target, seed, noise=target_noise)
    test = DomainSpec("target_test", dict(TARGET_WEIGHTS), n_test, seed, noise=target_noise)
    return {"source": source, "target_train": target, "target_test": test}


_DOMAIN_CODES = {"source": 1, "target_train": 2, "target_test": 3}


def _domain_code(name: str) -> int:
    return _DOMAIN_CODES.get(name, int(hashlib.sha256(name.encode()).hexdigest()[:6], 16))


def _euler_to_axis_angle(yaw: float, pitch: float, roll: float) -> np.ndarray:
    from scipy.spatial.transform import Rotation
    return Rotation.from_euler("YXZ", [yaw, pitch, roll]).as_rotvec()


def sample_domain(spec: DomainSpec, tree: KinematicTree | None = None,
                  template: MeshTemplate | None = None) -> Dataset:
    """Generate a fully labeled dataset; target-domain labels are firewalled."""
    tree = default_tree() if tree is None else tree
    clusters = default_clusters(tree, jitter=spec.jitter, weights=spec.cluster_weights)
    probs = _normalized([c.weight for c in clusters])
    code = _domain_code(spec.name)
    samples = []
    for i in range(spec.n_samples):
        rng = np.random.default_rng([spec.seed, code, i])
        pose, k = _draw_pose(clusters, probs, rng)
        beta = spec.shape_std * rng.standard_normal(N_BETAS)
        beta = np.clip(beta, -3.0, 3.0)
        orient = _euler_to_axis_angle(rng.uniform(-spec.yaw_range, spec.yaw_range),
                                      spec.tilt_std * rng.standard_normal(),
                                      spec.tilt_std * rng.standard_normal())
        cam = np.array([rng.uniform(*spec.scale_range),
                        rng.uniform(-spec.trans_range, spec.trans_range),
                        rng.uniform(-spec.trans_range, spec.trans_range)])
        state = forward_kinematics(tree, pose, orient, beta)
        joints2d = project(state.joints, cam)
        kp = synthesize_observation(joints2d, spec.noise, rng)
        verts2d = None
        if spec.modality == "silhouette":
            if template is None:
                raise ValueError("silhouette modality requires a mesh template")
            verts2d = project(lbs(template, state), cam)
        obs = observation_vector(spec.modality, kp, verts2d, template)
        hidden = {"pose": pose, "orient": orient, "beta": beta, "cam": cam,
                  "joints3d": state.joints, "joints2d": joints2d, "cluster": clusters[k].name}
        if not spec.name.startswith("target"):
            kp = np.concatenate([joints2d, np.ones((len(joints2d), 1))], axis=1)
        samples.append(Sample(f"{spec.name}-{i:06d}", spec.name, obs, kp, spec.modality, hidden))
    return Dataset(samples, spec.fingerprint(), spec.seed)


def domain_pose_gap(a: Dataset, b: Dataset) -> float:
    """Mean over joints of the angle between the domains' mean axis-angle vectors (eval labels)."""
    diff = a.eval_array("pose").mean(0) - b.eval_array("pose").mean(0)
    return float(np.linalg.norm(diff.reshape(-1, 3), axis=1).mean())


# -- persistence -------------------------------------------------------------

def _listify(x):
    return np.asarray(x).tolist()


def save_dataset(dataset: Dataset, path, domain: str | None = None) -> None:
    """JSON-lines: a header line, then one sample per line."""
    header = {"format": FORMAT_NAME, "version": FORMAT_VERSION, "count": len(dataset),
              "fingerprint": dataset.fingerprint, "seed": dataset.seed,
              "domain": domain or (dataset.samples[0].domain if dataset.samples else "")}
    lines = [json.dumps(header, sort_keys=True)]
    for s in dataset:
        row = {"id": s.id, "domain": s.domain,
               "obs": {"modality": s.modality, "values": _listify(s.observation)},
               "kp2d": _listify(s.keypoints)}
        h = s._hidden
        if "joints3d" in h:
            row["kp3d"] = _listify(h["joints3d"])
        if "pose" in h:
            row["params"] = {k: _listify(h[k]) for k in PARAM_KEYS}
        if "joints2d" in h:
            row["kp2d_eval"] = _listify(h["joints2d"])
        if "cluster" in h:
            row["cluster"] = h["cluster"]
        lines.append(json.dumps(row, sort_keys=True))
    Path(path).write_text("\n".join(lines) + "\n")


def load_dataset(path) -> Dataset:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset file not found: {path}")
    lines = path.read_text().splitlines()
    if not lines:
        raise SchemaError(f"{path}: empty file, expected a header line")
    header = json.loads(lines[0])
    if header.get("format") != FORMAT_NAME:
        raise SchemaError(f"{path}:1: not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise SchemaError(f"{path}:1: unsupported version {header.get('version')}")
    samples = []
    for lineno, line in enumerate(lines[1:], start=2):
        try:
            row = json.loads(line)
            hidden = {}
            if "kp3d" in row:
                hidden["joints3d"] = np.array(row["kp3d"], dtype=np.float64)
            if "params" in row:
                hidden.update({k: np.array(row["params"][k], dtype=np.float64) for k in PARAM_KEYS})
            if "kp2d_eval" in row:
                hidden["joints2d"] = np.array(row["kp2d_eval"], dtype=np.float64)
            if "cluster" in row:
                hidden["cluster"] = row["cluster"]
            samples.append(Sample(row["id"], row["domain"], np.array(row["obs"]["values"], dtype=np.float64),
                                  np.array(row["kp2d"], dtype=np.float64), row["obs"]["modality"], hidden))
        except (KeyError, TypeError, json.JSONDecodeError) as exc:
            raise SchemaError(f"{path}:{lineno}: malformed sample ({exc})") from exc
    if len(samples) != header.get("count"):
        raise SchemaError(f"{path}: header count {header.get('count')} != {len(samples)} samples")
    return Dataset(samples, header.get("fingerprint", ""), header.get("seed", 0))


def export_keypoint_json(dataset: Dataset, path, names) -> None:
    """Write 2D annotations in the keypoint ingestion schema."""
    doc = {"keypoint_names": list(names),
           "people": [{"id": s.id, "keypoints": _listify(s.keypoints)} for s in dataset]}
    Path(path).write_text(json.dumps(doc, indent=1) + "\n")


def load_keypoint_json(path, tree: KinematicTree | None = None, domain: str = "target_train") -> Dataset:
    """Parse ``{"keypoint_names": [...], "people": [{"id", "keypoints": [[x, y, c], ...]}]}``.

    Coordinates must lie in [-1, 1] and confidences in [0, 1]; the keypoint
    count must match the tree. Returns 2D-only samples.
    """
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"keypoint file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: line {exc.lineno}: invalid JSON ({exc.msg})") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: top level must be an object")
    names = doc.get("keypoint_names")
    people = doc.get("people")
    if not isinstance(names, list) or not all(isinstance(n, str) for n in names):
        raise SchemaError(f"{path}: 'keypoint_names' must be a list of strings")
    if not isinstance(people, list):
        raise SchemaError(f"{path}: 'people' must be a list")
    if tree is not None and len(names) != tree.n_joints:
        raise SchemaError(f"{path}: {len(names)} keypoints, tree has {tree.n_joints}")
    samples = []
    for p_i, person in enumerate(people):
        where = f"{path}: people[{p_i}]"
        if not isinstance(person, dict) or "keypoints" not in person:
            raise SchemaError(f"{where}: missing 'keypoints'")
        pid = str(person.get("id", p_i))
        kp = person["keypoints"]
        if not isinstance(kp, list) or len(kp) != len(names):
            raise SchemaError(f"{where}.keypoints: expected {len(names)} entries")
        for k_i, entry in enumerate(kp):
            field_name = f"{where}.keypoints[{k_i}]"
            if not isinstance(entry, list) or len(entry) != 3 or \
                    not all(isinstance(v, (int, float)) and not isinstance(v, bool) for v in entry):
                raise SchemaError(f"{field_name}: expected [x, y, confidence] numbers")
            x, y, c = entry
            if not (-1.0 <= x <= 1.0 and -1.0 <= y <= 1.0):
                raise SchemaError(f"{field_name}: coordinates must lie in [-1, 1]")
            if not (0.0 <= c <= 1.0):
                raise SchemaError(f"{field_name}.confidence: {c} outside [0, 1]")
        arr = np.array(kp, dtype=np.float64)
        samples.append(Sample(pid, domain, arr.reshape(-1).copy(), arr, "keypoints2d"))
    fp = hashlib.sha256(path.read_bytes()).hexdigest()[:16]
    return Dataset(samples, fp, 0)
