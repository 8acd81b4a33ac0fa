"""Two-branch per-pixel feature transform with learnable lighting patterns.

Each branch projects a lumitexel onto its own lighting patterns (a bias-free
linear layer), runs nine dense layers and ends in an L2 normalization.  The
intensity-insensitive branch additionally normalizes the measurements and
receives the view encoding only at its sixth dense layer.  A linear layer
combines both unit features into the final descriptor.

In pointlight mode the pattern layers are absent and both branches consume
the 96 one-light-at-a-time measurements directly.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from . import netcore as nc
from .errors import ContractError

LIGHTSTAGE = "lightstage"
POINTLIGHT = "pointlight"
BRANCHES = ("sens", "insens")
DEFAULT_HIDDEN = (32, 32, 64, 64, 64, 64, 32, 32)
N_DENSE = 9
INSENSITIVE_VIEW_LAYER = 5


@dataclass(frozen=True)
class BranchConfig:
    measurements: int
    widths: tuple[int, ...]  # nine output widths; the last is the branch feature length
    view_layer: int
    normalize_input: bool

    def __post_init__(self):
        if self.measurements < 1:
            raise ContractError("a branch needs at least one measurement")
        if len(self.widths) != N_DENSE:
            raise ContractError(f"a branch has {N_DENSE} dense layers, got {len(self.widths)} widths")
        if not 0 <= self.view_layer < N_DENSE:
            raise ContractError("view layer index out of range")

    @property
    def feature_length(self) -> int:
        return self.widths[-1]


@dataclass(frozen=True)
class ModelConfig:
    mode: str = LIGHTSTAGE
    inputs: int = 384  # L, or the number of point lights
    m_s: int = 3
    m_i: int = 5
    features: int = 16
    branches: str = "both"  # "both", "sens" or "insens"
    hidden: tuple[int, ...] = DEFAULT_HIDDEN
    branch_features: tuple[int, int] | None = None

    def __post_init__(self):
        if self.mode not in (LIGHTSTAGE, POINTLIGHT):
            raise ContractError(f"unknown mode {self.mode!r}")
        if self.branches not in ("both",) + BRANCHES:
            raise ContractError(f"unknown branch selection {self.branches!r}")
        if len(self.hidden) != N_DENSE - 1:
            raise ContractError(f"need {N_DENSE - 1} hidden widths")
        object.__setattr__(self, "hidden", tuple(self.hidden))
        if self.mode == POINTLIGHT:
            object.__setattr__(self, "m_s", self.inputs)
            object.__setattr__(self, "m_i", self.inputs)
        if self.branch_features is None:
            if self.mode == LIGHTSTAGE:
                bf = (2 * self.m_s, 2 * self.m_i)
            else:
                bf = (self.features // 2, self.features - self.features // 2)
            object.__setattr__(self, "branch_features", bf)
        object.__setattr__(self, "branch_features", tuple(self.branch_features))

    @property
    def active(self) -> tuple[str, ...]:
        return BRANCHES if self.branches == "both" else (self.branches,)

    @property
    def has_patterns(self) -> bool:
        return self.mode == LIGHTSTAGE

    @property
    def output_length(self) -> int:
        if self.branches == "both":
            return self.features
        return self.branch(self.branches).feature_length

    def branch(self, name: str) -> BranchConfig:
        if name == "sens":
            return BranchConfig(self.m_s, self.hidden + (self.branch_features[0],), 0, False)
        return BranchConfig(self.m_i, self.hidden + (self.branch_features[1],),
                            INSENSITIVE_VIEW_LAYER, True)

    def measurement_count(self, name: str) -> int:
        return self.m_s if name == "sens" else self.m_i

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        d["branch_features"] = list(self.branch_features)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["hidden"] = tuple(d["hidden"])
        d["branch_features"] = tuple(d["branch_features"])
        return cls(**d)

    def shapes(self) -> dict[str, tuple[int, ...]]:
        shapes = {}
        for name in self.active:
            br = self.branch(name)
            if self.has_patterns:
                shapes[f"{name}.pattern"] = (br.measurements, self.inputs)
            width = br.measurements
            for j, out in enumerate(br.widths):
                fan_in = width + (2 if j == br.view_layer else 0)
                shapes[f"{name}.fc{j}.W"] = (out, fan_in)
                shapes[f"{name}.fc{j}.b"] = (out,)
                width = out
        if self.branches == "both":
            total = sum(self.branch(n).feature_length for n in BRANCHES)
            shapes["combine.W"] = (self.features, total)
            shapes["combine.b"] = (self.features,)
        return shapes


@dataclass
class Tape:
    """Intermediate values of one forward pass, consumed by ``backward``."""

    x: np.ndarray
    view: np.ndarray
    noise: dict
    meas: dict = field(default_factory=dict)
    branch: dict = field(default_factory=dict)
    unit: dict = field(default_factory=dict)
    invalid: np.ndarray | None = None


class FeatureNet:
    """Parameters plus forward/backward for a :class:`ModelConfig`."""

    def __init__(self, config: ModelConfig, store: nc.ParamStore | None = None,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.config = config
        if store is None:
            store = nc.ParamStore(config.shapes(), dtype)
            init_params(store, config, rng or np.random.default_rng(0))
        elif store.shapes != config.shapes():
            raise ContractError("parameter store does not match model configuration")
        self.store = store

    @property
    def dtype(self):
        return self.store.dtype

    def with_store(self, store: nc.ParamStore) -> "FeatureNet":
        return FeatureNet(self.config, store)

    def patterns(self, name: str) -> np.ndarray:
        return self.store[f"{name}.pattern"]

    # -- forward ----------------------------------------------------------

    def measure(self, x, name: str) -> np.ndarray:
        """Measurements of ``name``'s branch: pattern projection, or the raw input in pointlight mode."""
        x = np.asarray(x, dtype=self.dtype)
        if x.shape[-1] != self.config.inputs:
            raise ContractError(
                f"{self.config.mode} model expects {self.config.inputs} inputs, got {x.shape[-1]}"
            )
        if not self.config.has_patterns:
            return x
        return x @ self.patterns(name).T

    def forward(self, x, view_enc, noise: dict | None = None, tape: bool = False):
        """Features for a batch of lumitexels ``(N, inputs)`` and view encodings ``(N, 2)``.

        ``noise`` maps branch names to multiplicative factors on that branch's
        measurements.  Returns the output features, plus a :class:`Tape` when
        requested.
        """
        x = np.atleast_2d(np.asarray(x, dtype=self.dtype))
        view = np.atleast_2d(np.asarray(view_enc, dtype=self.dtype))
        noise = noise or {}
        meas = {}
        for name in self.config.active:
            m = self.measure(x, name)
            if name in noise:
                m = m * noise[name].astype(self.dtype, copy=False)
            meas[name] = m
        out, t = self.forward_measurements(meas, view, tape=True)
        t.x = x
        t.noise = noise
        return (out, t) if tape else out

    def forward_measurements(self, meas: dict, view_enc, tape: bool = False):
        view = np.atleast_2d(np.asarray(view_enc, dtype=self.dtype))
        t = Tape(x=None, view=view, noise={})
        invalid = np.zeros(len(view), dtype=bool)
        units = []
        for name in self.config.active:
            m = np.atleast_2d(np.asarray(meas[name], dtype=self.dtype))
            if m.shape[-1] != self.config.measurement_count(name):
                raise ContractError(
                    f"branch {name} expects {self.config.measurement_count(name)} measurements, "
                    f"got {m.shape[-1]}"
                )
            t.meas[name] = m
            unit, cache, bad = self._branch_forward(name, m, view)
            t.branch[name] = cache
            t.unit[name] = unit
            invalid |= bad
            units.append(unit)
        t.invalid = invalid
        if self.config.branches == "both":
            out = nc.forward_dense(self.store["combine.W"], self.store["combine.b"],
                                   np.concatenate(units, axis=1))
        else:
            out = units[0]
        return (out, t) if tape else out

    def _branch_forward(self, name, meas, view):
        br = self.config.branch(name)
        p = self.store.params
        cache = {"pre": None, "inputs": [], "z": []}
        bad = np.zeros(len(meas), dtype=bool)
        h = meas
        if br.normalize_input:
            h, norm, inv = nc.l2_normalize(h)
            cache["pre"] = (h, norm, inv)
            bad |= inv
        for j in range(N_DENSE):
            if j == br.view_layer:
                h = np.concatenate([h, view], axis=1)
            cache["inputs"].append(h)
            z = nc.forward_dense(p[f"{name}.fc{j}.W"], p[f"{name}.fc{j}.b"], h)
            cache["z"].append(z)
            h = nc.activation(z) if j < N_DENSE - 1 else z
        unit, norm, inv = nc.l2_normalize(h)
        cache["post"] = (unit, norm, inv)
        bad |= inv
        return unit, cache, bad

    # -- backward ---------------------------------------------------------

    def backward(self, t: Tape, d_out, accumulate: bool = False, input_grad: bool = False):
        """Backpropagate ``d_out`` into ``store.grads``; optionally returns d/d(input)."""
        if not accumulate:
            self.store.zero_grad()
        g = self.store.grads
        d_out = np.asarray(d_out, dtype=self.dtype)
        if self.config.branches == "both":
            units = np.concatenate([t.unit[n] for n in BRANCHES], axis=1)
            d_units, dW, db = nc.backward_dense(self.store["combine.W"], units, d_out)
            g["combine.W"] += dW
            g["combine.b"] += db
            split = self.config.branch("sens").feature_length
            d_unit = {"sens": d_units[:, :split], "insens": d_units[:, split:]}
        else:
            d_unit = {self.config.branches: d_out}

        dx = None
        for name in self.config.active:
            d_meas = self._branch_backward(name, t.branch[name], d_unit[name])
            if name in t.noise:
                d_meas = d_meas * t.noise[name].astype(self.dtype, copy=False)
            if self.config.has_patterns:
                if t.x is not None:
                    g[f"{name}.pattern"] += d_meas.T @ t.x
                if input_grad:
                    contrib = d_meas @ self.patterns(name)
                    dx = contrib if dx is None else dx + contrib
            elif input_grad:
                dx = d_meas if dx is None else dx + d_meas
        return dx

    def _branch_backward(self, name, cache, d_unit):
        br = self.config.branch(name)
        p, g = self.store.params, self.store.grads
        dh = nc.l2_normalize_backward(*cache["post"], d_unit)
        for j in reversed(range(N_DENSE)):
            if j < N_DENSE - 1:
                dh = nc.activation_backward(cache["z"][j], dh)
            dh, dW, db = nc.backward_dense(p[f"{name}.fc{j}.W"], cache["inputs"][j], dh)
            g[f"{name}.fc{j}.W"] += dW
            g[f"{name}.fc{j}.b"] += db
            if j == br.view_layer:
                dh = dh[:, :-2]
        if br.normalize_input:
            dh = nc.l2_normalize_backward(*cache["pre"], dh)
        return dh


def init_params(store: nc.ParamStore, config: ModelConfig, rng: np.random.Generator) -> None:
    for name, shape in store.shapes.items():
        if name.endswith(".pattern"):
            store[name][...] = rng.uniform(-1.0, 1.0, size=shape)
        elif name.endswith(".W"):
            store[name][...] = nc.he_normal(rng, *shape)
        else:
            store[name][...] = 0.0
    if config.has_patterns:
        renormalize_patterns(store, rng)


def renormalize_patterns(store: nc.ParamStore, rng: np.random.Generator | None = None) -> list[tuple[str, int]]:
    """Scale every pattern row to max |w| = 1; near-zero rows are re-drawn.

    Returns the (tensor, row) pairs that had to be re-initialized.
    """
    reset = []
    for name in store.names():
        if not name.endswith(".pattern"):
            continue
        P = store[name]
        peak = np.max(np.abs(P), axis=1)
        dead = np.flatnonzero(peak < 1e-8)
        if len(dead):
            rng = rng or np.random.default_rng()
            P[dead] = rng.uniform(-1.0, 1.0, size=(len(dead), P.shape[1]))
            reset.extend((name, int(r)) for r in dead)
            peak = np.max(np.abs(P), axis=1)
        P /= peak[:, None]
    return reset


# -- spec-level entry points --------------------------------------------------

def _branch_only(net: FeatureNet, name: str, x, view_enc):
    if name not in net.config.active:
        raise ContractError(f"model has no {name} branch")
    _, t = net.forward(x, view_enc, tape=True)
    return t.unit[name]


def forward_sensitive(x, view_enc, net: FeatureNet) -> np.ndarray:
    return _branch_only(net, "sens", x, view_enc)


def forward_insensitive(x, view_enc, net: FeatureNet) -> np.ndarray:
    return _branch_only(net, "insens", x, view_enc)


def forward_combined(x, view_enc, net: FeatureNet) -> np.ndarray:
    if net.config.branches != "both":
        raise ContractError("model has no combining layer")
    return net.forward(x, view_enc)


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_KIND = "photoxform-model"


def save_checkpoint(path, net: FeatureNet, layout_config=None, extra: dict | None = None) -> None:
    manifest = {"kind": CHECKPOINT_KIND, "model": net.config.to_dict()}
    if layout_config is not None:
        manifest["layout"] = {"version": 1, "per_side": layout_config.per_side,
                              "box": list(layout_config.box), "pitch": layout_config.pitch}
    if extra:
        manifest.update(extra)
    nc.save_tensors(path, net.store.params, manifest)


def load_checkpoint(path) -> tuple[FeatureNet, dict]:
    tensors, manifest = nc.load_tensors(path)
    if not manifest or manifest.get("kind") != CHECKPOINT_KIND:
        raise ContractError(f"{path}: not a model checkpoint")
    config = ModelConfig.from_dict(manifest["model"])
    store = nc.ParamStore(config.shapes(), np.float32)
    store.load(tensors)
    return FeatureNet(config, store), manifest


def layout_config_from_manifest(manifest: dict):
    from .lightstage import LayoutConfig

    lay = manifest.get("layout")
    if lay is None:
        return None
    return LayoutConfig(per_side=lay["per_side"], box=tuple(lay["box"]), pitch=lay["pitch"])
