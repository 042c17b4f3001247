"""Synthetic instrument-pose benchmark: the candidate testing environment.

A screw-like instrument (bright segment plus head disc) is rendered into a
noisy 64x64 scene. Candidate networks see a 32x32 patch cropped around a
rough pose estimate and regress six geometric landmarks in patch-normalized
coordinates; the pose is then reconstructed from the landmarks, and the
crop/predict/reconstruct loop can be iterated to refine the estimate.

Candidate quality is the mean squared landmark error on a held-out
validation split (regmse), reported on the value scale -log10(regmse).
"""

from __future__ import annotations

import time
from dataclasses import dataclass, replace

import numpy as np
from threadpoolctl import threadpool_limits

from . import network as N
from . import tensor as T
from .snap import SnapSequence, build_block_graph

SCENE = 64
PATCH = 32
PATCH_HALF = PATCH / 2.0
MM_PER_PX = 0.25

SCREW_HALF_LEN = 10.0  # segment runs head -> tip, 20 px total
SCREW_HALF_WIDTH = 1.0
HEAD_RADIUS = 3.0
QUARTER_OFFSET = 5.0  # SCREW_HALF_LEN / 2: quarter point along the axis
SIDE_OFFSET = 4.0

POSE_MARGIN = 14.0  # screw must stay inside the scene
EST_POS_JITTER = 3.0
EST_ANGLE_JITTER = 15.0

LANDMARK_ROLES = ("tip", "head", "center", "quarter", "side_plus", "side_minus")


class OutOfBounds(ValueError):
    pass


class DegenerateLandmarks(ValueError):
    pass


@dataclass(frozen=True)
class Pose:
    x: float
    y: float
    angle_deg: float

    def __post_init__(self):
        object.__setattr__(self, "angle_deg", float(self.angle_deg) % 360.0)

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class SceneSample:
    image: np.ndarray  # (SCENE, SCENE) float64 in [0,1]
    truth: Pose
    estimate: Pose
    seed: int


def _axis_vectors(angle_deg: float) -> tuple[np.ndarray, np.ndarray]:
    th = np.deg2rad(angle_deg)
    u = np.array([np.cos(th), np.sin(th)])
    n = np.array([-np.sin(th), np.cos(th)])
    return u, n


def virtual_landmarks(pose: Pose) -> np.ndarray:
    """Six landmark points in scene pixels, rows ordered as LANDMARK_ROLES."""
    c = pose.position
    u, n = _axis_vectors(pose.angle_deg)
    return np.stack([
        c + SCREW_HALF_LEN * u,
        c - SCREW_HALF_LEN * u,
        c,
        c + QUARTER_OFFSET * u,
        c + SIDE_OFFSET * n,
        c - SIDE_OFFSET * n,
    ])


def normalized_landmarks(pose: Pose, patch_center: np.ndarray) -> np.ndarray:
    """Flattened 12-vector of landmarks in the [-1,1] patch frame."""
    pts = (virtual_landmarks(pose) - np.asarray(patch_center)) / PATCH_HALF
    return pts.reshape(-1)


def reconstruct_pose(landmarks12: np.ndarray, patch_center: np.ndarray) -> Pose:
    """Invert the landmark construction: least-squares axis fit + center point.

    The axis direction is the principal direction of the four on-axis points
    (tip, head, center, quarter), signed so tip - head projects positively.
    """
    pts = np.asarray(landmarks12, dtype=np.float64).reshape(6, 2) * PATCH_HALF + np.asarray(patch_center)
    axis_pts = pts[[0, 1, 2, 3]]
    centered = axis_pts - axis_pts.mean(axis=0)
    cov = centered.T @ centered
    scale = np.sqrt(np.trace(cov))
    if not np.isfinite(scale) or scale < 1e-9:
        raise DegenerateLandmarks("axis landmarks are (nearly) coincident")
    _, vecs = np.linalg.eigh(cov)
    d = vecs[:, -1]  # eigenvector of the largest eigenvalue
    if d @ (pts[0] - pts[1]) < 0:
        d = -d
    angle = np.degrees(np.arctan2(d[1], d[0]))
    return Pose(pts[2, 0], pts[2, 1], angle)


def pose_error(pred: Pose, truth: Pose) -> tuple[float, float]:
    """(position error in mm, absolute forward-angle error in degrees)."""
    dist_px = float(np.hypot(pred.x - truth.x, pred.y - truth.y))
    diff = abs(pred.angle_deg - truth.angle_deg) % 360.0
    if diff > 180.0:
        diff = 360.0 - diff
    return dist_px * MM_PER_PX, diff


# ---------------------------------------------------------------------------
# rendering


def _value_noise(rng: np.random.Generator, lo: float, hi: float, cell: int = 8) -> np.ndarray:
    """Low-frequency background: bilinear interpolation of a coarse grid."""
    g = SCENE // cell
    grid = rng.uniform(lo, hi, size=(g + 1, g + 1))
    t = (np.arange(SCENE) + 0.5) / cell - 0.5
    t = np.clip(t, 0.0, g - 1e-9)
    i0 = t.astype(int)
    f = t - i0
    rows = grid[i0][:, i0] * np.outer(1 - f, 1 - f) \
        + grid[i0][:, i0 + 1] * np.outer(1 - f, f) \
        + grid[i0 + 1][:, i0] * np.outer(f, 1 - f) \
        + grid[i0 + 1][:, i0 + 1] * np.outer(f, f)
    return rows


def render_scene(pose: Pose, rng: np.random.Generator, seed: int = 0,
                 perturb: bool = True) -> SceneSample:
    """Draw the instrument into a noisy scene; deterministic given the rng state."""
    if not (POSE_MARGIN <= pose.x <= SCENE - 1 - POSE_MARGIN
            and POSE_MARGIN <= pose.y <= SCENE - 1 - POSE_MARGIN):
        raise OutOfBounds(f"pose {pose} too close to the scene edge")
    img = _value_noise(rng, 0.15, 0.45)

    u, _ = _axis_vectors(pose.angle_deg)
    tip = pose.position + SCREW_HALF_LEN * u
    head = pose.position - SCREW_HALF_LEN * u
    yy, xx = np.mgrid[0:SCENE, 0:SCENE]
    px = np.stack([xx, yy], axis=-1).astype(np.float64)

    seg = tip - head
    tproj = np.clip(((px - head) @ seg) / (seg @ seg), 0.0, 1.0)
    closest = head + tproj[..., None] * seg
    d_seg = np.linalg.norm(px - closest, axis=-1)
    alpha = np.clip(0.5 + (SCREW_HALF_WIDTH - d_seg), 0.0, 1.0)

    d_head = np.linalg.norm(px - head, axis=-1)
    alpha = np.maximum(alpha, np.clip(0.5 + (HEAD_RADIUS - d_head), 0.0, 1.0))

    img = img * (1 - alpha) + 0.9 * alpha
    img = img * (1.0 + rng.uniform(-0.1, 0.1))
    img = img + rng.normal(0.0, 0.03, size=img.shape)
    img = np.clip(img, 0.0, 1.0)

    if perturb:
        est = Pose(
            pose.x + rng.uniform(-EST_POS_JITTER, EST_POS_JITTER),
            pose.y + rng.uniform(-EST_POS_JITTER, EST_POS_JITTER),
            pose.angle_deg + rng.uniform(-EST_ANGLE_JITTER, EST_ANGLE_JITTER),
        )
    else:
        est = pose
    return SceneSample(img, pose, est, seed)


def screw_mask(pose: Pose) -> np.ndarray:
    """Boolean scene mask of pixels the instrument body covers."""
    u, _ = _axis_vectors(pose.angle_deg)
    tip = pose.position + SCREW_HALF_LEN * u
    head = pose.position - SCREW_HALF_LEN * u
    yy, xx = np.mgrid[0:SCENE, 0:SCENE]
    px = np.stack([xx, yy], axis=-1).astype(np.float64)
    seg = tip - head
    tproj = np.clip(((px - head) @ seg) / (seg @ seg), 0.0, 1.0)
    d_seg = np.linalg.norm(px - (head + tproj[..., None] * seg), axis=-1)
    d_head = np.linalg.norm(px - head, axis=-1)
    return (d_seg <= SCREW_HALF_WIDTH) | (d_head <= HEAD_RADIUS)


def crop(image: np.ndarray, center_xy: np.ndarray) -> np.ndarray:
    """32x32 patch centered on center_xy: bilinear, zero padding outside."""
    cx, cy = float(center_xy[0]), float(center_xy[1])
    xs = cx + (np.arange(PATCH) - (PATCH - 1) / 2.0)
    ys = cy + (np.arange(PATCH) - (PATCH - 1) / 2.0)
    gx, gy = np.meshgrid(xs, ys)
    x0 = np.floor(gx).astype(int)
    y0 = np.floor(gy).astype(int)
    fx = gx - x0
    fy = gy - y0
    out = np.zeros((PATCH, PATCH))
    for dy in (0, 1):
        for dx in (0, 1):
            xi = x0 + dx
            yi = y0 + dy
            inside = (xi >= 0) & (xi < SCENE) & (yi >= 0) & (yi < SCENE)
            wgt = (fx if dx else 1 - fx) * (fy if dy else 1 - fy)
            vals = np.zeros_like(out)
            vals[inside] = image[yi[inside], xi[inside]]
            out += wgt * vals
    return out


def random_pose(rng: np.random.Generator) -> Pose:
    return Pose(rng.uniform(16.0, 48.0), rng.uniform(16.0, 48.0), rng.uniform(0.0, 360.0))


# ---------------------------------------------------------------------------
# value metric


def value_from_regmse(regmse: float) -> float:
    return float(-np.log10(max(float(regmse), 1e-12)))


@dataclass(frozen=True)
class CandidateResult:
    snap: str
    regmse: float
    value: float
    train_seed: int
    epochs: int
    wall_time: float
    failed: bool = False

    def to_json(self) -> dict:
        return {
            "snap": self.snap, "regmse": self.regmse, "value": self.value,
            "train_seed": self.train_seed, "epochs": self.epochs,
            "wall_time": self.wall_time, "failed": self.failed,
        }

    @staticmethod
    def from_json(obj: dict) -> "CandidateResult":
        return CandidateResult(
            obj["snap"], float(obj["regmse"]), float(obj["value"]),
            int(obj["train_seed"]), int(obj["epochs"]), float(obj["wall_time"]),
            bool(obj.get("failed", False)),
        )


# ---------------------------------------------------------------------------
# dataset


@dataclass(frozen=True)
class EnvConfig:
    n_train: int = 2000
    n_eval: int = 500
    augment_fold: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.n_train < 10 or self.n_eval < 10:
            raise ValueError("dataset sizes must be >= 10")


@dataclass
class Dataset:
    cfg: EnvConfig
    train_x: np.ndarray
    train_y: np.ndarray
    val_x: np.ndarray
    val_y: np.ndarray
    modelsel_x: np.ndarray
    modelsel_y: np.ndarray
    eval_samples: list[SceneSample]

    def split_sizes(self) -> tuple[int, int, int]:
        return len(self.train_x), len(self.val_x), len(self.modelsel_x)


def build_dataset(cfg: EnvConfig) -> Dataset:
    """Render the corpus: 70/10/20 base-pose split, augment_fold crops per base.

    Augmented copies of one base pose are re-rendered with fresh noise and a
    fresh initial-estimate perturbation, and never straddle splits.
    """
    root = np.random.SeedSequence([cfg.seed, 0xE17])
    base_ss, eval_ss = root.spawn(2)
    n70 = int(cfg.n_train * 0.7)
    n10 = int(cfg.n_train * 0.1)
    buckets = {"train": ([], []), "val": ([], []), "modelsel": ([], [])}
    for i, ss in enumerate(base_ss.spawn(cfg.n_train)):
        rng = np.random.default_rng(ss)
        pose = random_pose(rng)
        split = "train" if i < n70 else ("val" if i < n70 + n10 else "modelsel")
        xs, ys = buckets[split]
        for _ in range(cfg.augment_fold):
            sample = render_scene(pose, rng, seed=i)
            patch = crop(sample.image, sample.estimate.position)
            xs.append(patch)
            ys.append(normalized_landmarks(pose, sample.estimate.position))
    eval_samples = []
    for i, ss in enumerate(eval_ss.spawn(cfg.n_eval)):
        rng = np.random.default_rng(ss)
        eval_samples.append(render_scene(random_pose(rng), rng, seed=cfg.n_train + i))

    def pack(xs, ys):
        return (np.stack(xs)[:, None, :, :], np.stack(ys))

    tx, ty = pack(*buckets["train"])
    vx, vy = pack(*buckets["val"])
    mx, my = pack(*buckets["modelsel"])
    return Dataset(cfg, tx, ty, vx, vy, mx, my, eval_samples)


# ---------------------------------------------------------------------------
# candidate training / evaluation


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 20
    batch: int = 64
    lr: float = 1e-3
    seed: int = 0
    dtype: str = "float32"  # candidate training dtype; regmse reported as float64
    value_seeds: int = 1  # >1 averages regmse over reseeded trainings


def _np_dtype(name: str):
    return {"float32": np.float32, "float64": np.float64}[name]


def train_landmark_model(model: N.Model, x: np.ndarray, y: np.ndarray,
                         epochs: int, batch: int, lr: float, seed: int,
                         optimizer: str = "adam", on_epoch=None) -> None:
    rng = np.random.default_rng(seed)
    xd = x.astype(model.dtype, copy=False)
    yd = y.astype(model.dtype, copy=False)
    opt = T.Optimizer(model.params, kind=optimizer, lr=lr)
    n = len(xd)
    for ep in range(epochs):
        order = rng.permutation(n)
        for s in range(0, n, batch):
            idx = order[s:s + batch]
            opt.zero_grad()
            out = model.forward(T.Tensor(xd[idx]), train=True)
            T.mse_loss(out, T.Tensor(yd[idx])).backward()
            opt.step()
        if on_epoch is not None:
            on_epoch(ep)


def batched_regmse(model: N.Model, x: np.ndarray, y: np.ndarray, batch: int = 256) -> float:
    total = 0.0
    for s in range(0, len(x), batch):
        pred = model.predict(x[s:s + batch])
        total += float(np.sum((pred.astype(np.float64) - y[s:s + batch]) ** 2))
    return total / (len(x) * y.shape[1])


def evaluate_candidate(snap: SnapSequence, dataset: Dataset, train_cfg: TrainConfig,
                       macro: N.MacroConfig = N.SEARCH_CONFIG) -> CandidateResult:
    """Train the search-scale network for one candidate and score it.

    Pure function of (snap, dataset seed, train seed): BLAS is pinned to one
    thread so serial and pooled evaluations produce identical floats. Failed
    trainings (non-finite gradients) score the worst value, -12.
    """
    t0 = time.perf_counter()
    graph = build_block_graph(snap)
    spec = N.assemble(graph, macro)
    dtype = _np_dtype(train_cfg.dtype)
    mses: list[float] = []
    failed = False
    with threadpool_limits(limits=1):
        for k in range(train_cfg.value_seeds):
            seed = train_cfg.seed if k == 0 else hash_seed(train_cfg.seed, "reseed", k)
            model = N.instantiate(spec, seed=seed, dtype=dtype)
            try:
                train_landmark_model(model, dataset.train_x, dataset.train_y,
                                     train_cfg.epochs, train_cfg.batch, train_cfg.lr, seed)
            except T.NonFiniteGradient:
                failed = True
                break
            mses.append(batched_regmse(model, dataset.val_x, dataset.val_y))
    wall = time.perf_counter() - t0
    if failed or not mses:
        return CandidateResult(snap.render(), float("inf"), -12.0, train_cfg.seed,
                               train_cfg.epochs, wall, failed=True)
    regmse = float(np.mean(mses))
    return CandidateResult(snap.render(), regmse, value_from_regmse(regmse),
                           train_cfg.seed, train_cfg.epochs, wall)


def hash_seed(*parts) -> int:
    """Stable cross-process seed derivation (never the builtin hash)."""
    acc = np.random.SeedSequence(
        [abs(int(p)) if isinstance(p, (int, np.integer)) else _text_entropy(str(p)) for p in parts]
    )
    return int(acc.generate_state(1, np.uint32)[0])


def _text_entropy(text: str) -> int:
    import zlib

    return zlib.crc32(text.encode())


# ---------------------------------------------------------------------------
# iterative prediction


def clamp_pose(pose: Pose) -> Pose:
    return Pose(float(np.clip(pose.x, 0.0, SCENE - 1)), float(np.clip(pose.y, 0.0, SCENE - 1)), pose.angle_deg)


def iterative_predict(predict_fn, sample: SceneSample, iterations: int) -> Pose:
    """Crop -> predict landmarks -> reconstruct, repeated from the rough estimate.

    predict_fn(patch, frame_center) returns the 12-vector of normalized
    landmarks for that patch frame; a trained model ignores frame_center.
    """
    est = sample.estimate
    for _ in range(iterations):
        patch = crop(sample.image, est.position)
        lm = predict_fn(patch, est.position)
        est = clamp_pose(reconstruct_pose(lm, est.position))
    return est


def model_predictor(model: N.Model):
    def predict(patch: np.ndarray, _frame) -> np.ndarray:
        return model.predict(patch[None, None, :, :])[0]

    return predict


def evaluate_pose_errors(model: N.Model, samples: list[SceneSample], iterations: int) -> np.ndarray:
    """(n, 2) array of (position_mm, angle_deg) absolute errors."""
    predict = model_predictor(model)
    errs = []
    for s in samples:
        pred = iterative_predict(predict, s, iterations)
        errs.append(pose_error(pred, s.truth))
    return np.array(errs)


# ---------------------------------------------------------------------------
# debug exports


def write_pgm(path: str, image: np.ndarray):
    """8-bit binary PGM dump of a [0,1] grayscale image."""
    data = np.clip(np.asarray(image) * 255.0 + 0.5, 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P5\n{data.shape[1]} {data.shape[0]}\n255\n".encode())
        f.write(data.tobytes())


def ground_truth_csv_row(sample: SceneSample) -> str:
    lm = virtual_landmarks(sample.truth).reshape(-1)
    fields = [f"{sample.seed}", f"{sample.truth.x:.6f}", f"{sample.truth.y:.6f}",
              f"{sample.truth.angle_deg:.6f}"] + [f"{v:.6f}" for v in lm]
    return ",".join(fields)


GROUND_TRUTH_HEADER = "id,x,y,angle_deg," + ",".join(
    f"{role}_{ax}" for role in LANDMARK_ROLES for ax in ("x", "y")
)
