"""Anisotropic GGX reflectance, lumitexel rendering and training-point sampling.

Surface frames are 3x3 matrices whose columns are (tangent, bitangent,
normal); a world direction ``w`` has local coordinates ``w @ frame``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numba
import numpy as np

from .errors import ConfigurationError, DomainError, FormatError, GeometryError, SamplingError
from .lightstage import LightstageLayout, ViewSpec, turntable_angles, turntable_transform

# Schlick reflectance at normal incidence for a dielectric; the specular lobe
# is rescaled so that its amplitude at normal incidence equals rho_s.
FRESNEL_F0 = 0.04
EMITTER_PROFILE = 1.0


@dataclass(frozen=True)
class GgxBrdfParams:
    rho_d: float
    rho_s: float
    alpha_x: float
    alpha_y: float

    def __post_init__(self):
        if self.rho_d < 0 or self.rho_s < 0:
            raise ConfigurationError("albedos must be non-negative")
        for a in (self.alpha_x, self.alpha_y):
            if not 0 < a <= 1:
                raise ConfigurationError(f"roughness must lie in (0, 1], got {a}")


@dataclass(frozen=True)
class SurfaceSample:
    position: np.ndarray
    frame: np.ndarray  # columns: tangent, bitangent, normal

    def __post_init__(self):
        frame = np.asarray(self.frame, dtype=np.float64)
        if frame.shape != (3, 3):
            raise ConfigurationError("frame must be 3x3")
        if not np.allclose(frame.T @ frame, np.eye(3), atol=1e-6):
            raise ConfigurationError("frame must be orthonormal")
        if abs(np.linalg.det(frame) - 1.0) > 1e-6:
            raise ConfigurationError("frame must be right-handed")
        object.__setattr__(self, "frame", frame)
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))

    @property
    def normal(self) -> np.ndarray:
        return self.frame[:, 2]


@dataclass(frozen=True)
class Lumitexel:
    values: np.ndarray

    def __post_init__(self):
        if np.any(self.values < 0):
            raise GeometryError("lumitexel entries must be non-negative")


def frame_from_normal(normal, tangent_hint=None) -> np.ndarray:
    """Right-handed frame with the given normal; tangent from Gram-Schmidt on the hint."""
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n, axis=-1, keepdims=True)
    if tangent_hint is None:
        tangent_hint = np.where(
            np.abs(n[..., :1]) < 0.9, np.array([1.0, 0.0, 0.0]), np.array([0.0, 1.0, 0.0])
        )
    a = np.broadcast_to(np.asarray(tangent_hint, dtype=np.float64), n.shape)
    t = a - np.sum(a * n, axis=-1, keepdims=True) * n
    t = t / np.linalg.norm(t, axis=-1, keepdims=True)
    b = np.cross(n, t)
    return np.stack([t, b, n], axis=-1)


def ggx_brdf(wi, wo, rho_d, rho_s, alpha_x, alpha_y):
    """Lambert + anisotropic GGX with separable Smith masking, broadcasting.

    Directions are local-frame unit vectors ``(..., 3)``; pairs with either
    direction at or below the horizon evaluate to zero.
    """
    wi = np.asarray(wi, dtype=np.float64)
    wo = np.asarray(wo, dtype=np.float64)
    ax2 = np.asarray(alpha_x, dtype=np.float64) ** 2
    ay2 = np.asarray(alpha_y, dtype=np.float64) ** 2
    ci = wi[..., 2]
    co = wo[..., 2]
    above = (ci > 0) & (co > 0)
    ci_s = np.where(above, ci, 1.0)
    co_s = np.where(above, co, 1.0)

    h = wi + wo
    h = h / np.maximum(np.linalg.norm(h, axis=-1, keepdims=True), 1e-300)
    hx, hy, hz = h[..., 0], h[..., 1], h[..., 2]
    t = np.where(above, hx * hx / ax2 + hy * hy / ay2 + hz * hz, 1.0)
    ndf = 1.0 / (np.pi * np.sqrt(ax2 * ay2) * t * t)

    def smith_g1(v, c):
        tan2 = (ax2 * v[..., 0] ** 2 + ay2 * v[..., 1] ** 2) / (c * c)
        return 2.0 / (1.0 + np.sqrt(1.0 + tan2))

    g = smith_g1(wi, ci_s) * smith_g1(wo, co_s)
    c = np.clip(np.sum(wi * h, axis=-1), 0.0, 1.0)
    fresnel = 1.0 + (1.0 / FRESNEL_F0 - 1.0) * (1.0 - c) ** 5
    spec = np.asarray(rho_s) * ndf * g * fresnel / (4.0 * ci_s * co_s)
    value = np.asarray(rho_d) / np.pi + spec
    return np.where(above, value, 0.0)


def eval_brdf(wi_local, wo_local, params: GgxBrdfParams, strict: bool = False) -> float:
    wi_local = np.asarray(wi_local, dtype=np.float64)
    wo_local = np.asarray(wo_local, dtype=np.float64)
    if strict and (wi_local[2] <= 0 or wo_local[2] <= 0):
        raise DomainError("direction below the local horizon")
    return float(
        ggx_brdf(wi_local, wo_local, params.rho_d, params.rho_s, params.alpha_x, params.alpha_y)
    )


def render_batch_reference(layout: LightstageLayout, positions, frames, thetas, rho_d, rho_s,
                           alpha_x, alpha_y, camera=None) -> np.ndarray:
    """Vectorised numpy evaluation of :func:`render_batch`, kept as an independent check."""
    camera = layout.camera if camera is None else np.asarray(camera, dtype=np.float64)
    x, frame = turntable_transform(positions, frames, thetas)
    x = np.atleast_2d(x)
    frame = frame.reshape(-1, 3, 3)

    d = layout.positions[None, :, :] - x[:, None, :]
    r2 = np.einsum("nlk,nlk->nl", d, d)
    if np.any(r2 < 1e-12):
        raise GeometryError("surface sample coincides with an emitter")
    wi = d / np.sqrt(r2)[..., None]
    wo = camera[None, :] - x
    wo = wo / np.linalg.norm(wo, axis=-1, keepdims=True)

    wi_local = np.einsum("nlk,nkj->nlj", wi, frame)
    wo_local = np.einsum("nk,nkj->nj", wo, frame)
    col = lambda a: np.reshape(np.asarray(a, dtype=np.float64), (-1, 1))  # noqa: E731
    f = ggx_brdf(wi_local, wo_local[:, None, :], col(rho_d), col(rho_s), col(alpha_x), col(alpha_y))
    cos_emitter = np.maximum(-np.einsum("nlk,lk->nl", wi, layout.normals), 0.0)
    cos_surface = np.maximum(wi_local[..., 2], 0.0)
    return layout.areas * EMITTER_PROFILE / r2 * f * cos_surface * cos_emitter


@numba.njit(cache=True, fastmath=False)
def _render_kernel(x, frame, light_pos, light_nrm, areas, camera, rho_d, rho_s, ax, ay, out):
    n_pts = x.shape[0]
    n_lights = light_pos.shape[0]
    inv_f0 = 1.0 / FRESNEL_F0 - 1.0
    for n in range(n_pts):
        wo0 = camera[0] - x[n, 0]
        wo1 = camera[1] - x[n, 1]
        wo2 = camera[2] - x[n, 2]
        inv = 1.0 / np.sqrt(wo0 * wo0 + wo1 * wo1 + wo2 * wo2)
        wo0 *= inv
        wo1 *= inv
        wo2 *= inv
        # local view direction: components along tangent, bitangent, normal
        ox = wo0 * frame[n, 0, 0] + wo1 * frame[n, 1, 0] + wo2 * frame[n, 2, 0]
        oy = wo0 * frame[n, 0, 1] + wo1 * frame[n, 1, 1] + wo2 * frame[n, 2, 1]
        oz = wo0 * frame[n, 0, 2] + wo1 * frame[n, 1, 2] + wo2 * frame[n, 2, 2]
        ax2 = ax[n] * ax[n]
        ay2 = ay[n] * ay[n]
        diffuse = rho_d[n] / np.pi
        if oz > 0:
            g_o = 2.0 / (1.0 + np.sqrt(1.0 + (ax2 * ox * ox + ay2 * oy * oy) / (oz * oz)))
        else:
            g_o = 0.0
        for l in range(n_lights):
            d0 = light_pos[l, 0] - x[n, 0]
            d1 = light_pos[l, 1] - x[n, 1]
            d2 = light_pos[l, 2] - x[n, 2]
            r2 = d0 * d0 + d1 * d1 + d2 * d2
            if r2 < 1e-12:
                out[n, l] = np.nan
                continue
            r = np.sqrt(r2)
            d0 /= r
            d1 /= r
            d2 /= r
            iz = d0 * frame[n, 0, 2] + d1 * frame[n, 1, 2] + d2 * frame[n, 2, 2]
            cos_l = -(d0 * light_nrm[l, 0] + d1 * light_nrm[l, 1] + d2 * light_nrm[l, 2])
            if iz <= 0.0 or oz <= 0.0 or cos_l <= 0.0:
                out[n, l] = 0.0
                continue
            ix = d0 * frame[n, 0, 0] + d1 * frame[n, 1, 0] + d2 * frame[n, 2, 0]
            iy = d0 * frame[n, 0, 1] + d1 * frame[n, 1, 1] + d2 * frame[n, 2, 1]
            hx = ix + ox
            hy = iy + oy
            hz = iz + oz
            hn = np.sqrt(hx * hx + hy * hy + hz * hz)
            hx /= hn
            hy /= hn
            hz /= hn
            t = hx * hx / ax2 + hy * hy / ay2 + hz * hz
            ndf = 1.0 / (np.pi * ax[n] * ay[n] * t * t)
            g_i = 2.0 / (1.0 + np.sqrt(1.0 + (ax2 * ix * ix + ay2 * iy * iy) / (iz * iz)))
            c = ix * hx + iy * hy + iz * hz
            c = min(max(c, 0.0), 1.0)
            fres = 1.0 + inv_f0 * (1.0 - c) ** 5
            f = diffuse + rho_s[n] * ndf * g_i * g_o * fres / (4.0 * iz * oz)
            out[n, l] = areas[l] * EMITTER_PROFILE / r2 * f * iz * cos_l


def render_batch(layout: LightstageLayout, positions, frames, thetas, rho_d, rho_s,
                 alpha_x, alpha_y, camera=None) -> np.ndarray:
    """Lumitexels ``(N, L)`` for N object-space samples seen at turntable angles ``thetas``.

    One midpoint sample per emitter, uniform angular profile, no occlusion.
    """
    camera = layout.camera if camera is None else np.asarray(camera, dtype=np.float64)
    x, frame = turntable_transform(positions, frames, thetas)
    x = np.ascontiguousarray(np.atleast_2d(x))
    frame = np.ascontiguousarray(frame.reshape(-1, 3, 3))
    n = len(x)
    vec = lambda a: np.ascontiguousarray(np.broadcast_to(np.asarray(a, dtype=np.float64), (n,)))  # noqa: E731
    out = np.empty((n, layout.count))
    _render_kernel(x, frame, layout.positions, layout.normals, layout.areas,
                   np.asarray(camera, dtype=np.float64), vec(rho_d), vec(rho_s),
                   vec(alpha_x), vec(alpha_y), out)
    if np.isnan(out).any():
        raise GeometryError("surface sample coincides with an emitter")
    return out


def render_lumitexel(sample: SurfaceSample, view: ViewSpec, layout: LightstageLayout,
                     camera_pos, params: GgxBrdfParams) -> Lumitexel:
    values = render_batch(
        layout, sample.position[None], sample.frame[None], np.array([view.theta]),
        params.rho_d, params.rho_s, params.alpha_x, params.alpha_y, camera=camera_pos,
    )[0]
    return Lumitexel(values)


@dataclass(frozen=True)
class SamplingConfig:
    rho_d_range: tuple[float, float] = (0.0, 1.0)
    rho_s_range: tuple[float, float] = (0.0, 3.0)
    roughness_range: tuple[float, float] = (0.01, 1.0)  # sampled log-uniformly
    half_extent: float = 0.10
    view_angles: np.ndarray = field(default_factory=turntable_angles)
    max_retries: int = 1000

    def __post_init__(self):
        lo, hi = self.roughness_range
        if not (0 < lo <= hi <= 1):
            raise ConfigurationError(f"bad roughness range {self.roughness_range}")
        for name in ("rho_d_range", "rho_s_range"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ConfigurationError(f"bad {name} {getattr(self, name)}")
        if self.half_extent <= 0:
            raise ConfigurationError("half_extent must be positive")
        if len(np.atleast_1d(self.view_angles)) < 1:
            raise ConfigurationError("need at least one view angle")


@dataclass
class TrainingPoints:
    """k sampled points, each with two visible turntable angles."""

    positions: np.ndarray  # (k, 3)
    frames: np.ndarray  # (k, 3, 3)
    rho_d: np.ndarray
    rho_s: np.ndarray
    alpha_x: np.ndarray
    alpha_y: np.ndarray
    theta1: np.ndarray
    theta2: np.ndarray

    def __len__(self):
        return len(self.rho_d)

    def params(self, i) -> GgxBrdfParams:
        return GgxBrdfParams(float(self.rho_d[i]), float(self.rho_s[i]),
                             float(self.alpha_x[i]), float(self.alpha_y[i]))


def random_frames(rng: np.random.Generator, n: int) -> np.ndarray:
    normal = rng.normal(size=(n, 3))
    hint = rng.normal(size=(n, 3))
    return frame_from_normal(normal, hint)


def visible_mask(positions, frames, angles, camera) -> np.ndarray:
    """(N, A) mask of turntable angles at which each sample faces the camera."""
    x, frame = turntable_transform(positions[:, None, :], frames[:, None, :, :], angles[None, :])
    return np.einsum("nak,nak->na", camera - x, frame[..., :, 2]) > 0


def sample_training_points(rng: np.random.Generator, config: SamplingConfig, k: int,
                           camera) -> TrainingPoints:
    angles = np.atleast_1d(np.asarray(config.view_angles, dtype=np.float64))
    need_two = len(angles) > 1
    pos_parts, frame_parts = [], []
    collected = 0
    for _ in range(config.max_retries):
        n = max(2 * (k - collected), 4)
        pos = rng.uniform(-config.half_extent, config.half_extent, size=(n, 3))
        frames = random_frames(rng, n)
        vis = visible_mask(pos, frames, angles, camera)
        ok = vis.sum(axis=1) >= (2 if need_two else 1)
        pos_parts.append(pos[ok])
        frame_parts.append(frames[ok])
        collected += int(ok.sum())
        if collected >= k:
            break
    else:
        raise SamplingError(f"could not find {k} visible samples in {config.max_retries} rounds")

    pos = np.concatenate(pos_parts)[:k]
    frames = np.concatenate(frame_parts)[:k]
    vis = visible_mask(pos, frames, angles, camera)
    # Uniform choice of an ordered pair of distinct visible angles.
    keys = np.where(vis, rng.random(vis.shape), -1.0)
    order = np.argsort(-keys, axis=1, kind="stable")
    i1 = order[:, 0]
    i2 = order[:, 1] if need_two else order[:, 0]

    log_lo, log_hi = np.log(config.roughness_range)
    return TrainingPoints(
        positions=pos,
        frames=frames,
        rho_d=rng.uniform(*config.rho_d_range, size=k),
        rho_s=rng.uniform(*config.rho_s_range, size=k),
        alpha_x=np.exp(rng.uniform(log_lo, log_hi, size=k)),
        alpha_y=np.exp(rng.uniform(log_lo, log_hi, size=k)),
        theta1=angles[i1],
        theta2=angles[i2],
    )


def sample_training_point(rng: np.random.Generator, config: SamplingConfig, camera):
    pts = sample_training_points(rng, config, 1, camera)
    return (pts.params(0), SurfaceSample(pts.positions[0], pts.frames[0]),
            ViewSpec(pts.theta1[0]), ViewSpec(pts.theta2[0]))


def render_pairs(layout: LightstageLayout, pts: TrainingPoints) -> tuple[np.ndarray, np.ndarray]:
    """Lumitexels of every point at its first and second view, each ``(k, L)``."""
    both = render_batch(
        layout,
        np.concatenate([pts.positions, pts.positions]),
        np.concatenate([pts.frames, pts.frames]),
        np.concatenate([pts.theta1, pts.theta2]),
        *(np.tile(a, 2) for a in (pts.rho_d, pts.rho_s, pts.alpha_x, pts.alpha_y)),
    )
    k = len(pts)
    return both[:k], both[k:]


# -- LTX1 dataset container -------------------------------------------------

LTX_MAGIC = b"LTX1"
LTX_VERSION = 1


def record_dtype(count: int) -> np.dtype:
    return np.dtype([
        ("theta", "<f4"), ("position", "<f4", (3,)), ("frame", "<f4", (9,)),
        ("rho_d", "<f4"), ("rho_s", "<f4"), ("alpha_x", "<f4"), ("alpha_y", "<f4"),
        ("lumitexel", "<f4", (count,)),
    ])


def pairs_to_records(layout: LightstageLayout, pts: TrainingPoints, lum1, lum2) -> np.ndarray:
    """Interleave both views of each point: record ``2i`` is view 1, ``2i+1`` view 2."""
    k = len(pts)
    rec = np.zeros(2 * k, dtype=record_dtype(layout.count))
    for view, (theta, lum) in enumerate(((pts.theta1, lum1), (pts.theta2, lum2))):
        sl = slice(view, None, 2)
        rec["theta"][sl] = theta
        rec["position"][sl] = pts.positions
        rec["frame"][sl] = pts.frames.reshape(k, 9)
        for name in ("rho_d", "rho_s", "alpha_x", "alpha_y"):
            rec[name][sl] = getattr(pts, name)
        rec["lumitexel"][sl] = lum
    return rec


def write_dataset(path, records: np.ndarray, layout: LightstageLayout | None = None) -> None:
    count = records.dtype["lumitexel"].shape[0]
    with open(path, "wb") as f:
        f.write(LTX_MAGIC + struct.pack("<IIQ", LTX_VERSION, count, len(records)))
        f.write(records.astype(record_dtype(count), copy=False).tobytes())
        if layout is not None:
            f.write(layout.to_bytes())


def read_dataset(path) -> tuple[np.ndarray, LightstageLayout | None]:
    with open(path, "rb") as f:
        buf = f.read()
    if buf[:4] != LTX_MAGIC:
        raise FormatError(f"{path}: not an LTX1 dataset")
    version, count, n = struct.unpack_from("<IIQ", buf, 4)
    if version != LTX_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    dtype = record_dtype(count)
    end = 20 + n * dtype.itemsize
    if len(buf) < end:
        raise FormatError(f"{path}: truncated")
    records = np.frombuffer(buf, dtype=dtype, count=n, offset=20).copy()
    layout = LightstageLayout.from_bytes(buf[end:]) if len(buf) > end else None
    return records, layout
