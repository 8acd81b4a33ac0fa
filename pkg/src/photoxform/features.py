"""Per-pixel feature maps: extraction from measurement stacks, PCA reduction, visualization, I/O."""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, FormatError
from .lightstage import encode_view
from .model import FeatureNet

DEFAULT_PCA_DIM = 4
PCA_MAX_SAMPLES = 1_000_000


@dataclass(eq=False)
class MeasurementStack:
    data: np.ndarray  # (H, W, M, C)
    mask: np.ndarray  # (H, W) bool
    theta: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.ndim != 4 or self.data.shape[:2] != self.mask.shape:
            raise ContractError("stack data must be (H, W, M, C) with an (H, W) mask")
        if not np.all(np.isfinite(self.data[self.mask])):
            raise ContractError("stack has non-finite measurements at valid pixels")

    @property
    def shape(self):
        return self.data.shape


@dataclass(eq=False)
class FeatureMap:
    data: np.ndarray  # (H, W, D)
    mask: np.ndarray  # (H, W) bool
    theta: float

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.data.ndim != 3 or self.data.shape[:2] != self.mask.shape:
            raise ContractError("feature map must be (H, W, D) with an (H, W) mask")

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def valid_features(self) -> np.ndarray:
        return self.data[self.mask]


@dataclass(eq=False)
class PcaModel:
    mean: np.ndarray  # (F,)
    components: np.ndarray  # (D, F), orthonormal rows
    explained: np.ndarray  # (D,) variances

    @property
    def input_dim(self) -> int:
        return self.components.shape[1]

    @property
    def output_dim(self) -> int:
        return self.components.shape[0]


def expected_measurements(net: FeatureNet) -> int:
    cfg = net.config
    if not cfg.has_patterns:
        return cfg.inputs
    return sum(cfg.measurement_count(b) for b in cfg.active)


def _features_for(net: FeatureNet, meas: np.ndarray, view: np.ndarray):
    cfg = net.config
    if cfg.has_patterns:
        parts, off = {}, 0
        for b in cfg.active:
            m = cfg.measurement_count(b)
            parts[b] = meas[:, off : off + m]
            off += m
    else:
        parts = {b: meas for b in cfg.active}
    out, tape = net.forward_measurements(parts, view, tape=True)
    return out, tape.invalid


def extract(stack: MeasurementStack, net: FeatureNet, threads: int = 1,
            chunk: int = 65536) -> FeatureMap:
    """Run the network on every valid pixel and channel; channels are concatenated in order."""
    H, W, M, C = stack.shape
    if M != expected_measurements(net):
        raise ContractError(
            f"stack has {M} measurements, the {net.config.mode} model expects "
            f"{expected_measurements(net)}"
        )
    F = net.config.output_length
    rows = np.flatnonzero(stack.mask.ravel())
    flat = stack.data.reshape(H * W, M, C)[rows]
    view_one = encode_view(stack.theta).astype(np.float32)

    def run(sl):
        meas = flat[sl]
        view = np.broadcast_to(view_one, (len(meas), 2))
        feats, bad = [], np.zeros(len(meas), dtype=bool)
        for c in range(C):
            f, inv = _features_for(net, meas[:, :, c], view)
            feats.append(f)
            bad |= inv
        return np.concatenate(feats, axis=1), bad

    slices = [slice(i, i + chunk) for i in range(0, len(rows), chunk)] or [slice(0, 0)]
    if threads > 1 and len(slices) > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, slices))
    else:
        results = [run(s) for s in slices]
    feats = np.concatenate([r[0] for r in results]) if rows.size else np.zeros((0, F * C))
    bad = np.concatenate([r[1] for r in results]) if rows.size else np.zeros(0, dtype=bool)

    data = np.zeros((H * W, F * C), dtype=np.float32)
    mask = np.zeros(H * W, dtype=bool)
    data[rows] = feats
    mask[rows] = ~bad
    data[~mask] = 0.0
    return FeatureMap(data.reshape(H, W, F * C), mask.reshape(H, W), stack.theta)


def _gather(features) -> np.ndarray:
    if isinstance(features, FeatureMap):
        return features.valid_features()
    if isinstance(features, (list, tuple)) and features and isinstance(features[0], FeatureMap):
        return np.concatenate([m.valid_features() for m in features])
    return np.asarray(features)


def fit_pca(features, dim: int, max_samples: int = PCA_MAX_SAMPLES,
            rng: np.random.Generator | None = None, allow_deficient: bool = False) -> PcaModel:
    """Principal components of feature vectors pooled over all views.

    ``features`` is an ``(N, F)`` array, a FeatureMap or a list of them.
    Components are ordered by decreasing variance and signed so that each
    one's largest-magnitude coefficient is positive.
    """
    X = np.asarray(_gather(features), dtype=np.float64)
    n, F = X.shape
    if dim > F:
        raise ContractError(f"cannot keep {dim} components of {F}-dimensional features")
    if n <= dim:
        raise ContractError(f"need more than {dim} samples, got {n}")
    if n > max_samples:
        rng = rng or np.random.default_rng(0)
        X = X[np.sort(rng.choice(n, size=max_samples, replace=False))]
    mean = X.mean(axis=0)
    Xc = X - mean
    cov = Xc.T @ Xc / (len(X) - 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals, evecs = evals[order], evecs[:, order]
    tol = max(evals[0], 0.0) * F * np.finfo(np.float64).eps * 10
    rank = int(np.sum(evals > tol)) if evals[0] > 0 else 0
    if dim > rank and not allow_deficient:
        raise ContractError(f"features have rank {rank}; cannot fit {dim} components")
    comps = evecs[:, :dim].T.copy()
    peak = np.argmax(np.abs(comps), axis=1)
    signs = np.sign(comps[np.arange(dim), peak])
    comps *= np.where(signs == 0, 1.0, signs)[:, None]
    return PcaModel(mean, comps, np.maximum(evals[:dim], 0.0))


def project(fmap, pca: PcaModel):
    """Centre and project onto the components; accepts a FeatureMap or an ``(N, F)`` array."""
    if isinstance(fmap, FeatureMap):
        if fmap.dim != pca.input_dim:
            raise ContractError(f"map has {fmap.dim} channels, PCA expects {pca.input_dim}")
        out = np.zeros(fmap.data.shape[:2] + (pca.output_dim,), dtype=np.float32)
        out[fmap.mask] = project(fmap.data[fmap.mask], pca)
        return FeatureMap(out, fmap.mask.copy(), fmap.theta)
    X = np.asarray(fmap, dtype=np.float64)
    if X.shape[-1] != pca.input_dim:
        raise ContractError(f"features have {X.shape[-1]} channels, PCA expects {pca.input_dim}")
    return (X - pca.mean) @ pca.components.T


def visualize(fmap: FeatureMap) -> np.ndarray:
    """8-bit RGB picture: 3-D PCA, per-channel min-max over valid pixels, invalid pixels black.

    A channel without spread is drawn at mid-gray.
    """
    H, W, _ = fmap.data.shape
    img = np.zeros((H, W, 3), dtype=np.float64)
    X = fmap.valid_features().astype(np.float64)
    if len(X) == 0:
        return img.astype(np.uint8)
    if len(X) > 3 and fmap.dim >= 3:
        Y = project(X, fit_pca(X, 3, allow_deficient=True))
    else:
        Y = np.zeros((len(X), 3))
        k = min(3, fmap.dim)
        Y[:, :k] = X[:, :k] - X[:, :k].mean(axis=0)
    lo, hi = Y.min(axis=0), Y.max(axis=0)
    span = hi - lo
    flat = span <= 1e-12 * np.maximum(1.0, np.abs(hi))
    scaled = np.where(flat, 0.5, (Y - lo) / np.where(flat, 1.0, span))
    img[fmap.mask] = scaled
    return np.round(img * 255.0).astype(np.uint8)


def save_png(path, image: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(image).save(path)


# -- containers ---------------------------------------------------------------

FMAP_MAGIC, FMAP_VERSION = b"FMAP", 1
PCAM_MAGIC, PCAM_VERSION = b"PCAM", 1
MSTK_MAGIC, MSTK_VERSION = b"MSTK", 1


def _read(path, magic, version):
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != magic:
        raise FormatError(f"{path}: expected {magic.decode()} container")
    (v,) = struct.unpack_from("<I", buf, 4)
    if v != version:
        raise FormatError(f"{path}: unsupported version {v}")
    return buf


def write_feature_map(path, fmap: FeatureMap) -> None:
    H, W, D = fmap.data.shape
    with open(path, "wb") as f:
        f.write(FMAP_MAGIC + struct.pack("<IIIIf", FMAP_VERSION, H, W, D, fmap.theta))
        f.write(np.ascontiguousarray(fmap.data, dtype="<f4").tobytes())
        f.write(fmap.mask.astype(np.uint8).tobytes())


def read_feature_map(path) -> FeatureMap:
    buf = _read(path, FMAP_MAGIC, FMAP_VERSION)
    H, W, D, theta = struct.unpack_from("<IIIf", buf, 8)
    off = 24
    data = np.frombuffer(buf, dtype="<f4", count=H * W * D, offset=off).reshape(H, W, D)
    off += 4 * H * W * D
    mask = np.frombuffer(buf, dtype=np.uint8, count=H * W, offset=off).reshape(H, W)
    return FeatureMap(data.astype(np.float32), mask.astype(bool), float(theta))


def write_pca(path, pca: PcaModel) -> None:
    with open(path, "wb") as f:
        f.write(PCAM_MAGIC + struct.pack("<III", PCAM_VERSION, pca.input_dim, pca.output_dim))
        for arr in (pca.mean, pca.components, pca.explained):
            f.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_pca(path) -> PcaModel:
    buf = _read(path, PCAM_MAGIC, PCAM_VERSION)
    F, D = struct.unpack_from("<II", buf, 8)
    vals = np.frombuffer(buf, dtype="<f8", count=F + D * F + D, offset=16)
    return PcaModel(vals[:F].copy(), vals[F : F + D * F].reshape(D, F).copy(), vals[F + D * F :].copy())


def write_stack(path, stack: MeasurementStack) -> None:
    H, W, M, C = stack.shape
    with open(path, "wb") as f:
        f.write(MSTK_MAGIC + struct.pack("<IIIIId", MSTK_VERSION, H, W, M, C, stack.theta))
        f.write(np.ascontiguousarray(stack.data, dtype="<f4").tobytes())
        f.write(stack.mask.astype(np.uint8).tobytes())


def read_stack(path) -> MeasurementStack:
    buf = _read(path, MSTK_MAGIC, MSTK_VERSION)
    H, W, M, C, theta = struct.unpack_from("<IIIId", buf, 8)
    off = 32
    n = H * W * M * C
    data = np.frombuffer(buf, dtype="<f4", count=n, offset=off).reshape(H, W, M, C)
    mask = np.frombuffer(buf, dtype=np.uint8, count=H * W, offset=off + 4 * n).reshape(H, W)
    return MeasurementStack(data.copy(), mask.astype(bool), theta)
