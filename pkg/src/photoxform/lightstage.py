"""Capture rig geometry: box-shaped emitter array, turntable and view encoding.

World frame: z is the vertical turntable axis, the device center is the
origin and the camera sits on the front (-y) face looking toward +y.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigurationError, FormatError

FACE_NAMES = ("+x", "-x", "+y", "-y", "+z", "-z")
LAYOUT_MAGIC = b"LAYT"
LAYOUT_VERSION = 1


class AngularProfile(Enum):
    UNIFORM = "uniform"


@dataclass(frozen=True)
class LightSource:
    position: np.ndarray
    normal: np.ndarray
    area: float
    angular_profile: AngularProfile = AngularProfile.UNIFORM

    def __post_init__(self):
        if self.area <= 0:
            raise ConfigurationError(f"emitter area must be positive, got {self.area}")
        if abs(np.linalg.norm(self.normal) - 1.0) > 1e-6:
            raise ConfigurationError("emitter normal must be unit length")


@dataclass(frozen=True)
class LayoutConfig:
    per_side: int = 8
    box: tuple[float, float, float] = (0.80, 0.80, 0.77)
    pitch: float = 0.09

    @classmethod
    def paper_scale(cls) -> "LayoutConfig":
        return cls(per_side=64, box=(0.80, 0.80, 0.77), pitch=0.01)


@dataclass(frozen=True, eq=False)
class LightstageLayout:
    """All emitters of the rig stored as flat arrays, one row per emitter.

    Row ``l`` of every array is lumitexel entry ``l``.
    """

    positions: np.ndarray  # (L, 3)
    normals: np.ndarray  # (L, 3), pointing into the box
    areas: np.ndarray  # (L,)
    faces: tuple[np.ndarray, ...]  # one index array per entry of FACE_NAMES
    box: tuple[float, float, float]
    camera: np.ndarray = field(default=None)  # (3,)

    def __post_init__(self):
        if self.camera is None:
            object.__setattr__(self, "camera", default_camera(self.box))
        for arr in (self.positions, self.normals, self.areas, self.camera):
            arr.setflags(write=False)

    @property
    def count(self) -> int:
        return len(self.areas)

    @property
    def sources(self) -> list[LightSource]:
        return [
            LightSource(self.positions[i], self.normals[i], float(self.areas[i]))
            for i in range(self.count)
        ]

    def to_bytes(self) -> bytes:
        head = LAYOUT_MAGIC + struct.pack("<II", LAYOUT_VERSION, self.count)
        head += struct.pack("<3d", *self.box)
        body = b"".join(
            np.ascontiguousarray(a, dtype="<f8").tobytes()
            for a in (self.positions, self.normals, self.areas, self.camera)
        )
        return head + body

    @classmethod
    def from_bytes(cls, buf: bytes) -> "LightstageLayout":
        if buf[:4] != LAYOUT_MAGIC:
            raise FormatError("not a layout section")
        version, count = struct.unpack_from("<II", buf, 4)
        if version != LAYOUT_VERSION:
            raise FormatError(f"unsupported layout version {version}")
        box = struct.unpack_from("<3d", buf, 12)
        off = 36
        data = np.frombuffer(buf, dtype="<f8", count=7 * count + 3, offset=off)
        positions = data[: 3 * count].reshape(count, 3).copy()
        normals = data[3 * count : 6 * count].reshape(count, 3).copy()
        areas = data[6 * count : 7 * count].copy()
        camera = data[7 * count :].copy()
        return cls(positions, normals, areas, _faces_for(count), tuple(box), camera)

    @staticmethod
    def section_size(count: int) -> int:
        return 36 + 8 * (7 * count + 3)


def default_camera(box) -> np.ndarray:
    return np.array([0.0, -box[1] / 2.0, 0.0])


def _faces_for(count: int) -> tuple[np.ndarray, ...]:
    per_face = count // 6
    return tuple(np.arange(i * per_face, (i + 1) * per_face) for i in range(6))


def build_layout(config: LayoutConfig | None = None) -> LightstageLayout:
    """Lay out ``per_side x per_side`` emitters centred on each of the six faces."""
    config = config or LayoutConfig()
    n = config.per_side
    box = np.asarray(config.box, dtype=np.float64)
    if n < 1:
        raise ConfigurationError(f"per_side must be >= 1, got {n}")
    if box.shape != (3,) or np.any(box <= 0):
        raise ConfigurationError(f"box dimensions must be positive, got {config.box}")
    if config.pitch <= 0:
        raise ConfigurationError(f"pitch must be positive, got {config.pitch}")

    offsets = (np.arange(n) - (n - 1) / 2.0) * config.pitch
    positions, normals = [], []
    for name in FACE_NAMES:
        axis = "xyz".index(name[1])
        sign = 1.0 if name[0] == "+" else -1.0
        u, v = [a for a in range(3) if a != axis]
        if (n - 1) * config.pitch > min(box[u], box[v]) + 1e-12:
            raise ConfigurationError(
                f"{n} emitters at pitch {config.pitch} do not fit on face {name}"
            )
        gu, gv = np.meshgrid(offsets, offsets, indexing="ij")
        p = np.zeros((n * n, 3))
        p[:, axis] = sign * box[axis] / 2.0
        p[:, u] = gu.ravel()
        p[:, v] = gv.ravel()
        nrm = np.zeros((n * n, 3))
        nrm[:, axis] = -sign
        positions.append(p)
        normals.append(nrm)

    positions = np.concatenate(positions)
    areas = np.full(len(positions), config.pitch**2)
    return LightstageLayout(
        positions=positions,
        normals=np.concatenate(normals),
        areas=areas,
        faces=_faces_for(len(positions)),
        box=tuple(float(b) for b in box),
    )


@dataclass(frozen=True)
class ViewSpec:
    theta: float

    def __post_init__(self):
        object.__setattr__(self, "theta", float(self.theta) % (2.0 * np.pi))


def encode_view(view) -> np.ndarray:
    """``[cos(theta), sin(theta)]``; accepts a ViewSpec, a scalar or an array of angles."""
    theta = view.theta if isinstance(view, ViewSpec) else np.asarray(view, dtype=np.float64)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def turntable_angles(n_views: int = 24) -> np.ndarray:
    return np.arange(n_views) * (2.0 * np.pi / n_views)


def rotation_z(theta) -> np.ndarray:
    """Rotation matrices about the vertical axis; broadcasts over ``theta``."""
    theta = np.asarray(theta, dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    out = np.zeros(theta.shape + (3, 3))
    out[..., 0, 0] = c
    out[..., 0, 1] = -s
    out[..., 1, 0] = s
    out[..., 1, 1] = c
    out[..., 2, 2] = 1.0
    return out


def turntable_transform(p, frame, theta):
    """Rotate positions ``(..., 3)`` and frames ``(..., 3, 3)`` about the turntable axis."""
    rot = rotation_z(theta)
    p = np.asarray(p, dtype=np.float64)
    frame = np.asarray(frame, dtype=np.float64)
    return np.einsum("...ij,...j->...i", rot, p), rot @ frame
