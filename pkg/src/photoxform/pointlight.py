"""Directional-light rig for conventional photometric stereo input (96 one-light captures)."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, ContractError
from .lightstage import LayoutConfig, default_camera, turntable_transform
from .model import POINTLIGHT, FeatureNet
from .shading import ggx_brdf

N_LIGHTS = 96


@dataclass(frozen=True, eq=False)
class PointLightRig:
    directions: np.ndarray  # (n, 3) unit vectors from the object toward each light
    intensities: np.ndarray  # (n,)
    camera: np.ndarray = field(default_factory=lambda: default_camera(LayoutConfig().box))

    def __post_init__(self):
        d = np.asarray(self.directions, dtype=np.float64)
        w = np.asarray(self.intensities, dtype=np.float64)
        if d.ndim != 2 or d.shape[1] != 3 or len(d) != len(w):
            raise ConfigurationError("rig needs matching (n, 3) directions and n intensities")
        if not np.allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-6):
            raise ConfigurationError("rig directions must be unit vectors")
        if np.any(w <= 0):
            raise ConfigurationError("rig intensities must be positive")
        object.__setattr__(self, "directions", d)
        object.__setattr__(self, "intensities", w)
        object.__setattr__(self, "camera", np.asarray(self.camera, dtype=np.float64))

    def __len__(self):
        return len(self.intensities)

    def to_json(self) -> str:
        return json.dumps([{"direction": list(map(float, d)), "intensity": float(w)}
                           for d, w in zip(self.directions, self.intensities)])

    @classmethod
    def from_json(cls, text: str, camera=None) -> "PointLightRig":
        entries = json.loads(text)
        d = np.array([e["direction"] for e in entries], dtype=np.float64)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        w = np.array([e["intensity"] for e in entries], dtype=np.float64)
        if camera is None:
            return cls(d, w)
        return cls(d, w, camera)


def default_rig(rings: int = 8, per_ring: int = 12, max_polar_deg: float = 60.0) -> PointLightRig:
    """Lights on a hemispherical grid around the camera direction (-y)."""
    polar = np.radians(np.linspace(max_polar_deg / rings, max_polar_deg, rings))
    az = np.arange(per_ring) * (2 * np.pi / per_ring)
    p, a = np.meshgrid(polar, az, indexing="ij")
    p, a = p.ravel(), a.ravel()
    # local hemisphere around -y: x and z span the tangent plane
    d = np.stack([np.sin(p) * np.cos(a), -np.cos(p), np.sin(p) * np.sin(a)], axis=1)
    return PointLightRig(d, np.ones(len(d)))


def render_pointlight_batch(rig: PointLightRig, positions, frames, thetas, rho_d, rho_s,
                            alpha_x, alpha_y, mask=None) -> np.ndarray:
    """``(N, n_lights)`` one-light-at-a-time measurements; masked lights read zero."""
    x, frame = turntable_transform(positions, frames, thetas)
    x = np.atleast_2d(x)
    frame = frame.reshape(-1, 3, 3)
    wo = rig.camera[None, :] - x
    wo = wo / np.linalg.norm(wo, axis=-1, keepdims=True)
    wi_local = np.einsum("lk,nkj->nlj", rig.directions, frame)
    wo_local = np.einsum("nk,nkj->nj", wo, frame)
    col = lambda a: np.reshape(np.asarray(a, dtype=np.float64), (-1, 1))  # noqa: E731
    f = ggx_brdf(wi_local, wo_local[:, None, :], col(rho_d), col(rho_s), col(alpha_x), col(alpha_y))
    out = rig.intensities * f * np.maximum(wi_local[..., 2], 0.0)
    if mask is not None:
        out = out * np.asarray(mask, dtype=np.float64)
    return out


def render_pointlight_vector(sample, view, rig: PointLightRig, params, mask=None) -> np.ndarray:
    return render_pointlight_batch(
        rig, sample.position[None], sample.frame[None], np.array([view.theta]),
        params.rho_d, params.rho_s, params.alpha_x, params.alpha_y, mask,
    )[0]


def light_mask(rig: PointLightRig, n_active: int, rng: np.random.Generator | None = None) -> np.ndarray:
    """Float mask keeping ``n_active`` lights.

    Without an rng the lights are picked by farthest-point sampling over the
    rig directions, starting from the light nearest the camera axis.
    """
    n = len(rig)
    if not 1 <= n_active <= n:
        raise ConfigurationError(f"active light count must be in [1, {n}]")
    if rng is not None:
        idx = rng.choice(n, size=n_active, replace=False)
    else:
        d = rig.directions
        to_cam = rig.camera / np.linalg.norm(rig.camera)
        idx = [int(np.argmax(d @ to_cam))]
        closest = d @ d[idx[0]]
        for _ in range(n_active - 1):
            nxt = int(np.argmin(closest))
            idx.append(nxt)
            closest = np.maximum(closest, d @ d[nxt])
    mask = np.zeros(n)
    mask[idx] = 1.0
    return mask


def forward_pointlight(meas, view_enc, net: FeatureNet) -> np.ndarray:
    if net.config.mode != POINTLIGHT:
        raise ContractError("forward_pointlight needs a pointlight-mode model")
    return net.forward(meas, view_enc)
