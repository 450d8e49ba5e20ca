"""Dataset ingestion, preprocessing, synthetic scenes, and backbones.

Manifests are whitespace-separated text lines "relpath tx ty tz qw qx qy
qz" with '#' comments, the common convention for outdoor relocalization
splits. Feature stores hold precomputed per-image vectors in a small
binary format (layout documented in the README). The tiny CNN backbone
exists to prove end-to-end differentiability from pixels; the feature
store is the fast path and carries no auxiliary heads, so the auxiliary
loss weight is inert there.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import ModelParams, Tensor
from .errors import DataError, DimensionError, ParseError, UsageError
from .layers import fc_forward, xavier_uniform
from .pose import Pose

FEATURE_STORE_MAGIC = b"CLFS"
FEATURE_STORE_VERSION = 1


# ---------------------------------------------------------------------------
# Samples and manifests
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Sample:
    """One record: an id, an image or feature payload, and its pose."""

    id: str
    payload: np.ndarray
    pose: Pose

    def __post_init__(self):
        p = self.payload
        if not isinstance(p, np.ndarray):
            raise DataError(f"Sample {self.id}: payload must be an ndarray")
        if p.ndim == 1:
            if p.dtype != np.float64:
                raise DataError(f"Sample {self.id}: feature payload must be float64")
        elif p.ndim == 3 and p.shape[2] == 3:
            if p.dtype != np.uint8:
                raise DataError(f"Sample {self.id}: image payload must be 8-bit")
        else:
            raise DataError(f"Sample {self.id}: payload shape {p.shape} is neither "
                            "a feature vector nor an H x W x 3 image")

    @property
    def kind(self) -> str:
        return "feature" if self.payload.ndim == 1 else "image"


@dataclass(frozen=True)
class DatasetManifest:
    """Parsed split: root directory, split name, and (relpath, pose) records."""

    root: Path
    split: str
    records: tuple[tuple[str, Pose], ...]
    note: str = ""

    def __post_init__(self):
        if self.split not in ("train", "test"):
            raise UsageError(f"DatasetManifest: split must be train or test, got {self.split!r}")
        ids = [rel for rel, _ in self.records]
        if len(set(ids)) != len(ids):
            dupes = sorted({x for x in ids if ids.count(x) > 1})
            raise DataError(f"DatasetManifest: duplicate ids {dupes[:3]}")

    def __len__(self) -> int:
        return len(self.records)


def load_manifest(path, split: str = "train", check_files: bool = True) -> DatasetManifest:
    """Parse a manifest file.

    Quaternions are normalized and sign-canonicalized on the way in, so
    every stored pose satisfies the ground-truth invariants. Set
    ``check_files=False`` for manifests whose payloads come from a
    feature store rather than image files on disk.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    records: list[tuple[str, Pose]] = []
    text = path.read_text(encoding="utf-8")
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].rstrip()
        if not line.strip():
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"expected 8 fields (relpath + 7 floats), got {len(fields)}",
                             path=str(path), line=line_no, column=1)
        rel = fields[0]
        values = []
        for tok in fields[1:]:
            try:
                values.append(float(tok))
            except ValueError:
                col = raw.index(tok) + 1
                raise ParseError(f"bad float {tok!r}", path=str(path),
                                 line=line_no, column=col) from None
        p = np.array(values[:3])
        q = np.array(values[3:])
        if not np.all(np.isfinite(values)):
            raise DataError(f"{path}:{line_no}: non-finite pose for {rel!r}")
        if float(np.linalg.norm(q)) <= 1e-12:
            raise DataError(f"{path}:{line_no}: zero-norm quaternion for {rel!r}")
        records.append((rel, Pose.create(p, q)))
        if check_files and not (path.parent / rel).is_file():
            raise DataError(f"{path}:{line_no}: referenced file missing: {path.parent / rel}")
    return DatasetManifest(root=path.parent, split=split, records=tuple(records))


def save_manifest(manifest: DatasetManifest, path) -> None:
    """Write a manifest in the text format load_manifest reads.

    Floats are written with repr, which round-trips them exactly; poses
    are already normalized, so load(save(m)) reproduces m bit for bit.
    """
    path = Path(path)
    lines = [f"# {manifest.split} split, {len(manifest.records)} records"]
    if manifest.note:
        lines.append(f"# {manifest.note}")
    for rel, pose in manifest.records:
        nums = " ".join(repr(float(v)) for v in (*pose.p, *pose.q))
        lines.append(f"{rel} {nums}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Images: PPM always, PNG when Pillow is around
# ---------------------------------------------------------------------------

def read_ppm(path) -> np.ndarray:
    """Binary P6, 8-bit. Returns uint8 [H x W x 3]."""
    path = Path(path)
    blob = path.read_bytes()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if pos < len(blob) and blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ParseError("truncated header", path=str(path), line=1, column=pos + 1)
        fields.append(blob[start:pos])
    if fields[0] != b"P6":
        raise ParseError(f"not a binary PPM (magic {fields[0]!r})",
                         path=str(path), line=1, column=1)
    try:
        w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    except ValueError:
        raise ParseError("non-integer header field", path=str(path), line=1, column=1) from None
    if maxval != 255:
        raise ParseError(f"only maxval 255 supported, got {maxval}",
                         path=str(path), line=1, column=1)
    pos += 1  # single whitespace byte after maxval
    pixels = blob[pos:]
    if len(pixels) < w * h * 3:
        raise ParseError(f"pixel data truncated: {len(pixels)} bytes for {w}x{h}",
                         path=str(path), line=1, column=pos + 1)
    return np.frombuffer(pixels[:w * h * 3], dtype=np.uint8).reshape(h, w, 3).copy()


def write_ppm(path, img: np.ndarray) -> None:
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[2] != 3 or img.dtype != np.uint8:
        raise UsageError(f"write_ppm: need uint8 H x W x 3, got {img.dtype} {img.shape}")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_image(path) -> np.ndarray:
    """uint8 [H x W x 3] from a .ppm (native) or .png/.jpg (via Pillow)."""
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    try:
        from PIL import Image
    except ImportError:
        raise UsageError(
            f"reading {path.suffix} needs Pillow (install the 'png' extra); "
            "PPM works without it") from None
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def load_samples(manifest: DatasetManifest, store: "FeatureStore | None" = None) -> list[Sample]:
    """Materialize manifest records as Samples.

    With a feature store, payloads are looked up by relpath; otherwise
    the referenced image files are read.
    """
    samples = []
    for rel, pose in manifest.records:
        if store is not None:
            samples.append(Sample(id=rel, payload=store.get(rel), pose=pose))
        else:
            samples.append(Sample(id=rel, payload=read_image(manifest.root / rel), pose=pose))
    return samples


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

def _resize_axis(arr: np.ndarray, new_len: int, axis: int) -> np.ndarray:
    n = arr.shape[axis]
    if new_len == n:
        return arr
    pos = np.linspace(0.0, n - 1.0, new_len)
    lo = np.floor(pos).astype(np.intp)
    hi = np.minimum(lo + 1, n - 1)
    frac = pos - lo
    a = np.take(arr, lo, axis=axis)
    b = np.take(arr, hi, axis=axis)
    shape = [1] * arr.ndim
    shape[axis] = new_len
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def resize_shorter_side(img: np.ndarray, base: int) -> np.ndarray:
    """Bilinear resize so the shorter spatial side equals ``base``; the
    longer side scales proportionally (rounded). Returns float64."""
    if img.ndim != 3:
        raise DimensionError(f"resize_shorter_side: need H x W x C, got {img.shape}")
    if base < 1:
        raise UsageError(f"resize_shorter_side: base must be >= 1, got {base}")
    h, w = img.shape[:2]
    out = np.asarray(img, dtype=np.float64)
    if h <= w:
        new_h, new_w = base, max(1, round(w * base / h))
    else:
        new_h, new_w = max(1, round(h * base / w)), base
    out = _resize_axis(out, new_h, axis=0)
    out = _resize_axis(out, new_w, axis=1)
    return out


def compute_mean_image(images) -> np.ndarray:
    """Per-pixel, per-channel mean over the training split.

    Accepts arrays or Samples; all entries must share one shape (resize
    first). Only ever feed the training split to this.
    """
    arrays = [np.asarray(im.payload if isinstance(im, Sample) else im, dtype=np.float64)
              for im in images]
    if not arrays:
        raise UsageError("compute_mean_image: empty split")
    shape = arrays[0].shape
    if any(a.shape != shape for a in arrays):
        raise DimensionError(
            f"compute_mean_image: mixed shapes {sorted({a.shape for a in arrays})}")
    acc = np.zeros(shape)
    for a in arrays:
        acc += a
    return acc / len(arrays)


def preprocess(img: np.ndarray, mean: np.ndarray, mode: str, crop: int = 224,
               rng: np.random.Generator | None = None, base_resize: int = 256) -> Tensor:
    """Resize, crop, subtract the mean, scale.

    The shorter side is resized to ``base_resize``, then a ``crop`` x
    ``crop`` window is taken: uniformly random in train mode, centered in
    test mode. The mean (computed on resized training images) is cropped
    with the same offsets before subtraction. Values map to the [-1, 1]
    pixel convention: out = (pixels - mean) / 127.5.
    """
    if mode not in ("train", "test"):
        raise UsageError(f"preprocess: mode must be train or test, got {mode!r}")
    resized = resize_shorter_side(img, base_resize)
    h, w = resized.shape[:2]
    if h < crop or w < crop:
        raise DataError(f"preprocess: resized image {h}x{w} smaller than crop {crop}")
    if mean.shape != resized.shape:
        raise DimensionError(
            f"preprocess: mean shape {mean.shape} != resized image {resized.shape}")
    if mode == "train":
        if rng is None:
            raise UsageError("preprocess: train mode needs an rng")
        top = int(rng.integers(0, h - crop + 1))
        left = int(rng.integers(0, w - crop + 1))
    else:
        top = (h - crop) // 2
        left = (w - crop) // 2
    window = (slice(top, top + crop), slice(left, left + crop))
    out = (resized[window] - mean[window]) / 127.5
    return Tensor(out)


# ---------------------------------------------------------------------------
# Synthetic desk-scale scenes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticScene:
    """Deterministic synthetic dataset: poses in a box, features from a
    fixed random Fourier map of the pose, plus seeded noise.

    The map is smooth and injective enough that features determine pose,
    so a correct model (or even nearest neighbor in feature space) can
    invert it. ``noiseless_features`` exposes the clean map for tests.
    """

    train: tuple[Sample, ...]
    test: tuple[Sample, ...]
    extent_m: float
    feature_size: int
    noise_sigma: float
    _omega: np.ndarray = field(repr=False)
    _phase: np.ndarray = field(repr=False)
    _mu: np.ndarray = field(repr=False)
    _sd: np.ndarray = field(repr=False)

    def noiseless_features(self, pose: Pose) -> np.ndarray:
        u = np.concatenate([pose.p * (2.0 / self.extent_m), pose.q])
        raw = math.sqrt(2.0) * np.cos(self._omega @ u + self._phase)
        return (raw - self._mu) / self._sd


def synth_scene(seed: int, n_train: int, n_test: int, extent_m: float, F: int,
                noise_sigma: float = 0.01, bandwidth: float = 1.25) -> SyntheticScene:
    """Generate train/test splits of a synthetic scene.

    Positions are uniform in a centered box of side ``extent_m``;
    orientations are uniform on the quaternion sphere (normalized 4-D
    Gaussians, sign-canonicalized). Features are random Fourier features
    of the scaled pose with additive Gaussian noise. Everything is a pure
    function of the arguments.
    """
    if extent_m <= 0:
        raise UsageError(f"synth_scene: extent_m must be positive, got {extent_m}")
    if n_train < 10:
        raise UsageError(f"synth_scene: need n_train >= 10, got {n_train}")
    if n_test < 1:
        raise UsageError(f"synth_scene: need n_test >= 1, got {n_test}")
    if F < 1:
        raise UsageError(f"synth_scene: need F >= 1, got {F}")
    seeds = np.random.SeedSequence(seed).spawn(5)
    rng_map = np.random.default_rng(seeds[0])
    omega = rng_map.normal(scale=bandwidth, size=(F, 7))
    phase = rng_map.uniform(0.0, 2.0 * np.pi, size=F)

    # Standardize each feature over the pose distribution (probed once at
    # construction): raw cosines carry pose-independent offsets that would
    # otherwise dominate the pose signal downstream. The std floor keeps
    # near-constant features from blowing up.
    probe_p = rng_map.uniform(-extent_m / 2.0, extent_m / 2.0, (1024, 3))
    probe_q = rng_map.normal(size=(1024, 4))
    probe_q /= np.linalg.norm(probe_q, axis=1, keepdims=True)
    probe_q[probe_q[:, 0] < 0.0] *= -1.0
    probe_u = np.concatenate([probe_p * (2.0 / extent_m), probe_q], axis=1)
    raw = math.sqrt(2.0) * np.cos(probe_u @ omega.T + phase)
    mu = raw.mean(axis=0)
    sd = np.maximum(raw.std(axis=0), 0.05)

    def make_split(name, n, pose_ss, noise_ss):
        rng_pose = np.random.default_rng(pose_ss)
        rng_noise = np.random.default_rng(noise_ss)
        samples = []
        for i in range(n):
            p = rng_pose.uniform(-extent_m / 2.0, extent_m / 2.0, 3)
            pose = Pose.create(p, rng_pose.normal(size=4))
            u = np.concatenate([pose.p * (2.0 / extent_m), pose.q])
            feat = (math.sqrt(2.0) * np.cos(omega @ u + phase) - mu) / sd
            if noise_sigma > 0.0:
                feat = feat + rng_noise.normal(scale=noise_sigma, size=F)
            samples.append(Sample(id=f"{name}/{i:05d}", payload=feat, pose=pose))
        return tuple(samples)

    train = make_split("train", n_train, seeds[1], seeds[2])
    test = make_split("test", n_test, seeds[3], seeds[4])
    return SyntheticScene(train=train, test=test, extent_m=float(extent_m),
                          feature_size=F, noise_sigma=float(noise_sigma),
                          _omega=omega, _phase=phase, _mu=mu, _sd=sd)


# ---------------------------------------------------------------------------
# Backbones
# ---------------------------------------------------------------------------

class FeatureStore:
    """Immutable id -> feature map; the non-learnable backbone."""

    def __init__(self, features: Mapping[str, np.ndarray]):
        if not features:
            raise UsageError("FeatureStore: empty store")
        converted = {}
        size = None
        for key, vec in features.items():
            arr = np.asarray(vec, dtype=np.float64)
            if arr.ndim != 1:
                raise DataError(f"FeatureStore: {key!r} is not a vector: shape {arr.shape}")
            if size is None:
                size = arr.shape[0]
            elif arr.shape[0] != size:
                raise DataError(
                    f"FeatureStore: {key!r} has length {arr.shape[0]}, others {size}")
            arr = arr.copy()
            arr.setflags(write=False)
            converted[key] = arr
        self._features = converted
        self.feature_size = size

    def get(self, sample_id: str) -> np.ndarray:
        try:
            return self._features[sample_id]
        except KeyError:
            raise DataError(f"FeatureStore: no features for id {sample_id!r}") from None

    def ids(self) -> list[str]:
        return list(self._features)

    def __len__(self) -> int:
        return len(self._features)


def save_feature_store(store: FeatureStore, path) -> None:
    """Binary layout: magic 'CLFS', u32 version, u32 F, u32 count, then
    per record u32 id byte length, id UTF-8, F little-endian float64."""
    with open(path, "wb") as fh:
        fh.write(FEATURE_STORE_MAGIC)
        header = np.array([FEATURE_STORE_VERSION, store.feature_size, len(store)],
                          dtype="<u4")
        fh.write(header.tobytes())
        for sample_id in store.ids():
            encoded = sample_id.encode("utf-8")
            fh.write(np.array([len(encoded)], dtype="<u4").tobytes())
            fh.write(encoded)
            fh.write(store.get(sample_id).astype("<f8").tobytes())


def load_feature_store(path) -> FeatureStore:
    path = Path(path)
    blob = path.read_bytes()
    if blob[:4] != FEATURE_STORE_MAGIC:
        raise DataError(f"{path}: not a feature store (magic {blob[:4]!r})")
    if len(blob) < 16:
        raise DataError(f"{path}: truncated header")
    version, size, count = np.frombuffer(blob[4:16], dtype="<u4")
    if version != FEATURE_STORE_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    pos = 16
    features: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 4 > len(blob):
            raise DataError(f"{path}: truncated record header at byte {pos}")
        (id_len,) = np.frombuffer(blob[pos:pos + 4], dtype="<u4")
        pos += 4
        end = pos + int(id_len) + 8 * int(size)
        if end > len(blob):
            raise DataError(f"{path}: truncated record at byte {pos}")
        sample_id = blob[pos:pos + id_len].decode("utf-8")
        pos += int(id_len)
        vec = np.frombuffer(blob[pos:pos + 8 * int(size)], dtype="<f8").copy()
        pos += 8 * int(size)
        features[sample_id] = vec
    return FeatureStore(features)


@dataclass(frozen=True)
class TinyCnnParams:
    """Three strided 3x3 conv layers with tanh, spatial average, and an
    FC to the feature vector. The optional auxiliary head regresses a
    coarse pose off the mid-stack activations."""

    k1: Tensor
    b1: Tensor
    k2: Tensor
    b2: Tensor
    k3: Tensor
    b3: Tensor
    W_feat: Tensor
    b_feat: Tensor
    W_aux_pos: Tensor | None = None
    b_aux_pos: Tensor | None = None
    W_aux_quat: Tensor | None = None
    b_aux_quat: Tensor | None = None

    @property
    def feature_size(self) -> int:
        return self.W_feat.shape[0]

    @property
    def has_aux(self) -> bool:
        return self.W_aux_pos is not None

    def as_model_params(self) -> ModelParams:
        values = {"k1": self.k1, "b1": self.b1, "k2": self.k2, "b2": self.b2,
                  "k3": self.k3, "b3": self.b3,
                  "W_feat": self.W_feat, "b_feat": self.b_feat}
        biases = {"b1", "b2", "b3", "b_feat"}
        if self.has_aux:
            values.update({"aux.W_pos": self.W_aux_pos, "aux.b_pos": self.b_aux_pos,
                           "aux.W_quat": self.W_aux_quat, "aux.b_quat": self.b_aux_quat})
            biases |= {"aux.b_pos", "aux.b_quat"}
        return ModelParams(values, bias_names=biases)

    @classmethod
    def from_model_params(cls, params: ModelParams) -> "TinyCnnParams":
        aux = {}
        if "aux.W_pos" in params:
            aux = dict(W_aux_pos=params["aux.W_pos"], b_aux_pos=params["aux.b_pos"],
                       W_aux_quat=params["aux.W_quat"], b_aux_quat=params["aux.b_quat"])
        return cls(k1=params["k1"], b1=params["b1"], k2=params["k2"], b2=params["b2"],
                   k3=params["k3"], b3=params["b3"],
                   W_feat=params["W_feat"], b_feat=params["b_feat"], **aux)


def init_tiny_cnn(rng: np.random.Generator, feature_size: int,
                  channels: tuple[int, int, int] = (8, 12, 16),
                  aux: bool = False) -> TinyCnnParams:
    c1, c2, c3 = channels

    def kernel(cin, cout):
        limit = np.sqrt(6.0 / (9 * cin + 9 * cout))
        return Tensor(rng.uniform(-limit, limit, (3, 3, cin, cout)))

    extra = {}
    if aux:
        extra = dict(W_aux_pos=xavier_uniform(rng, 3, c2),
                     b_aux_pos=Tensor(np.zeros(3)),
                     W_aux_quat=xavier_uniform(rng, 4, c2),
                     b_aux_quat=Tensor(np.array([1.0, 0.0, 0.0, 0.0])))
    return TinyCnnParams(
        k1=kernel(3, c1), b1=Tensor(np.zeros(c1)),
        k2=kernel(c1, c2), b2=Tensor(np.zeros(c2)),
        k3=kernel(c2, c3), b3=Tensor(np.zeros(c3)),
        W_feat=xavier_uniform(rng, feature_size, c3),
        b_feat=Tensor(np.zeros(feature_size)), **extra)


def tiny_cnn_features(img: Tensor, theta: TinyCnnParams):
    """Forward the conv stack.

    Returns (features, aux) where features is [F] (or [B x F]) and aux is
    a tuple of (p_hat, q_raw) pairs from the mid-stack head, empty when
    the head is absent.
    """
    a1 = ad.tanh(ad.conv2d(img, theta.k1, theta.b1, stride=2))
    a2 = ad.tanh(ad.conv2d(a1, theta.k2, theta.b2, stride=2))
    aux: tuple = ()
    if theta.has_aux:
        mid = ad.spatial_mean(a2)
        aux = ((fc_forward(mid, theta.W_aux_pos, theta.b_aux_pos),
                fc_forward(mid, theta.W_aux_quat, theta.b_aux_quat)),)
    a3 = ad.tanh(ad.conv2d(a2, theta.k3, theta.b3, stride=2))
    pooled = ad.spatial_mean(a3)
    feat = fc_forward(pooled, theta.W_feat, theta.b_feat)
    return feat, aux


def extract_features(backbone, sample: Sample, mode: str = "eval"):
    """Feature vector for a sample under the given backbone.

    Feature stores look payloads up by id (and ignore mode); the tiny CNN
    runs its stack on an image payload, participating in any active
    gradient tape. Returns (Tensor[F], aux pairs).
    """
    if mode not in ("train", "eval"):
        raise UsageError(f"extract_features: mode must be train or eval, got {mode!r}")
    if isinstance(backbone, FeatureStore):
        return Tensor(backbone.get(sample.id)), ()
    if isinstance(backbone, TinyCnnParams):
        if sample.kind != "image":
            raise DataError(f"extract_features: sample {sample.id} has no image payload")
        img = Tensor(np.asarray(sample.payload, dtype=np.float64) / 127.5 - 1.0)
        return tiny_cnn_features(img, backbone)
    raise UsageError(f"extract_features: unknown backbone {type(backbone).__name__}")
