"""SDF network, neural renderer and variance parameter."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Dual, ParameterStore
from .optim import Adam, warmup_cosine


@dataclass
class ModelConfig:
    sdf_layers: int = 8
    sdf_width: int = 256
    feature_dim: int = 256
    skip_layer: int = 4
    pe_position: int = 6
    pe_direction: int = 4
    render_layers: int = 4
    render_width: int = 256
    softplus_beta: float = 100.0
    init_radius: float = 0.5
    init_inv_s: float = 0.3
    init_fit_steps: int = 300


def encoded_dim(d: int, num_frequencies: int, include_input: bool = True) -> int:
    return d * (int(include_input) + 2 * num_frequencies)


def encode(x, num_frequencies: int, include_input: bool = True):
    """[x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)]

    Each block holds all input components in order.
    """
    parts = [x] if include_input else []
    for k in range(num_frequencies):
        scaled = ad.mul(x, (2.0**k) * math.pi)
        parts += [ad.sin(scaled), ad.cos(scaled)]
    if len(parts) == 1:
        return parts[0]
    return ad.concat(parts, axis=-1)


class SdfFieldModel:
    """Two MLPs sharing one flat parameter store.

    Forward methods accept plain arrays, tape ``Var`` objects or ``Dual``
    points; pass ``params`` from :meth:`ParameterStore.bind` to record on a
    tape, otherwise the current numpy values are used.
    """

    def __init__(self, config: ModelConfig | None = None, seed: int = 0):
        self.config = config or ModelConfig()
        self.store = ParameterStore()
        self._build(np.random.default_rng(seed))
        self.geometric_init(self.config.init_radius, seed=seed, fit_steps=self.config.init_fit_steps)

    # -------------------------------------------------------------- layout

    def _sdf_dims(self):
        c = self.config
        d_in = encoded_dim(3, c.pe_position)
        dims = []
        for layer in range(c.sdf_layers):
            fan_in = d_in if layer == 0 else c.sdf_width
            fan_out = c.sdf_width
            if layer + 1 == c.skip_layer:
                fan_out = c.sdf_width - d_in
            dims.append((fan_in, fan_out))
        return d_in, dims

    def _render_dims(self):
        c = self.config
        d_in = 3 + encoded_dim(3, c.pe_direction) + 3 + c.feature_dim
        widths = [d_in] + [c.render_width] * c.render_layers + [3]
        return list(zip(widths[:-1], widths[1:]))

    def _build(self, rng):
        c = self.config
        d_in, dims = self._sdf_dims()
        if c.skip_layer and not 0 < c.skip_layer < c.sdf_layers:
            raise ValueError("skip_layer must index a hidden layer")
        if c.skip_layer and c.sdf_width <= d_in:
            raise ValueError("sdf_width must exceed the encoded input size when using a skip")
        for i, (a, b) in enumerate(dims):
            self.store.add(f"sdf.w{i}", np.zeros((a, b)))
            self.store.add(f"sdf.b{i}", np.zeros(b))
        self.store.add("sdf.head_w", np.zeros((c.sdf_width, 1)))
        self.store.add("sdf.head_b", np.zeros(1))
        bound = 1.0 / math.sqrt(c.sdf_width)
        self.store.add("sdf.feat_w", rng.uniform(-bound, bound, (c.sdf_width, c.feature_dim)))
        self.store.add("sdf.feat_b", rng.uniform(-bound, bound, c.feature_dim))
        for i, (a, b) in enumerate(self._render_dims()):
            bound = 1.0 / math.sqrt(a)
            self.store.add(f"rgb.w{i}", rng.uniform(-bound, bound, (a, b)))
            self.store.add(f"rgb.b{i}", rng.uniform(-bound, bound, b))
        self.store.add("variance", [math.log(1.0 / c.init_inv_s) / 10.0])

    def geometric_init(self, radius: float, seed: int = 0, fit_steps: int = 300,
                       fit_points: int = 1024) -> None:
        """Re-initialise the SDF network so that f(x) is close to |x| - radius.

        The classic sphere-shaped weight initialisation is followed by
        ``fit_steps`` Adam steps regressing f onto |x| - radius over random
        points in the unit ball; with beta=100 softplus units the analytic
        initialisation alone rounds the cone off far beyond tolerance.
        """
        if not 0 < radius < 1:
            raise ValueError("radius must lie in (0, 1)")
        rng = np.random.default_rng(seed)
        c = self.config
        d_in, dims = self._sdf_dims()
        for i, (a, b) in enumerate(dims):
            w = rng.normal(0.0, math.sqrt(2.0) / math.sqrt(b), (a, b))
            if i == 0:
                w[3:, :] = 0.0
            elif i == c.skip_layer:
                w[-(d_in - 3):, :] = 0.0
            self.store.view(f"sdf.w{i}")[...] = w
            self.store.view(f"sdf.b{i}")[...] = 0.0
        self.store.view("sdf.head_w")[...] = rng.normal(
            math.sqrt(math.pi) / math.sqrt(c.sdf_width), 1e-4, (c.sdf_width, 1)
        )
        self.store.view("sdf.head_b")[...] = -radius
        if fit_steps > 0:
            self._fit_sphere(radius, rng, fit_steps, fit_points)

    def _fit_sphere(self, radius, rng, steps, n_points):
        names = [n for n in self.store.names() if n.startswith("sdf.") and "feat" not in n]
        sub = ParameterStore()
        for n in names:
            sub.add(n, self.store.view(n))
        opt = Adam(len(sub), lr=1e-3)
        for step in range(steps):
            x = rng.normal(size=(n_points, 3))
            x *= (rng.uniform(0.0, 1.05**3, (n_points, 1)) ** (1 / 3)) / np.linalg.norm(x, axis=1, keepdims=True)
            target = np.linalg.norm(x, axis=1) - radius
            tape = ad.Tape()
            bound = sub.bind(tape)
            f, _ = self.sdf_forward(x, bound, with_feature=False)
            loss = ad.mean((f - target) ** 2)
            opt.step(sub.values, ad.backward(loss, bound), lr=warmup_cosine(step, steps, 1e-3, 0, 1e-4))
        for n in names:
            self.store.view(n)[...] = sub.view(n)

    # ------------------------------------------------------------- forward

    def _p(self, params):
        return self.store.arrays() if params is None else params

    def sdf_forward(self, x, params=None, with_feature: bool = True):
        """Signed distance (shape x.shape[:-1]) and feature vector."""
        p = self._p(params)
        c = self.config
        enc = encode(x, c.pe_position)
        h = enc
        for i in range(c.sdf_layers):
            if c.skip_layer and i == c.skip_layer:
                h = ad.mul(ad.concat([h, enc], axis=-1), 1.0 / math.sqrt(2.0))
            h = ad.softplus(ad.linear(h, p[f"sdf.w{i}"], p[f"sdf.b{i}"]), c.softplus_beta)
        sdf = ad.linear(h, p["sdf.head_w"], p["sdf.head_b"])
        sdf = sdf[..., 0]
        if not with_feature:
            return sdf, None
        hv = h.val if isinstance(h, Dual) else h
        feat = ad.linear(hv, p["sdf.feat_w"], p["sdf.feat_b"])
        return sdf, feat

    def color_forward(self, x, view_dir, normal, feature, params=None):
        """RGB in [0, 1] from position, view direction, SDF gradient and feature."""
        p = self._p(params)
        c = self.config
        h = ad.concat([x, encode(view_dir, c.pe_direction), normal, feature], axis=-1)
        n = len(self._render_dims())
        for i in range(n):
            h = ad.linear(h, p[f"rgb.w{i}"], p[f"rgb.b{i}"])
            h = ad.relu(h) if i < n - 1 else ad.sigmoid(h)
        return h

    def inv_s(self, params=None):
        """Standard deviation 1/s, with s = exp(10 * variance)."""
        p = self._p(params)
        return ad.exp(ad.mul(p["variance"][0], -10.0))

    def s(self) -> float:
        return float(np.exp(10.0 * self.store.view("variance")[0]))

    # --------------------------------------------------------- conveniences

    def sdf(self, x, chunk: int = 65536) -> np.ndarray:
        """Untaped SDF values for an (N, 3) array."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 3)
        out = np.empty(len(flat))
        p = self.store.arrays()
        for i in range(0, len(flat), chunk):
            out[i : i + chunk] = self.sdf_forward(flat[i : i + chunk], p, with_feature=False)[0]
        return out.reshape(x.shape[:-1])

    def sdf_and_gradient(self, x, chunk: int = 16384):
        """Untaped SDF values and spatial gradients (forward mode)."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, 3)
        vals = np.empty(len(flat))
        grads = np.empty((len(flat), 3))
        p = self.store.arrays()
        for i in range(0, len(flat), chunk):
            v, g = ad.spatial_eval(
                lambda d: self.sdf_forward(d, p, with_feature=False)[0], flat[i : i + chunk]
            )
            vals[i : i + chunk] = v
            grads[i : i + chunk] = g
        return vals.reshape(x.shape[:-1]), grads.reshape(x.shape)

    # ----------------------------------------------------------- checkpoint

    def save(self, path, step: int = 0) -> None:
        header = {
            "format": "nisurf-checkpoint-1",
            "step": int(step),
            "config": asdict(self.config),
            "layout": [[n, off, list(shape)] for n, off, shape in self.store.layout],
            "count": int(self.store.values.size),
        }
        data = json.dumps(header).encode() + b"\n" + self.store.values.astype("<f8").tobytes()
        Path(path).write_bytes(data)

    @classmethod
    def load(cls, path) -> tuple["SdfFieldModel", int]:
        raw = Path(path).read_bytes()
        nl = raw.index(b"\n")
        header = json.loads(raw[:nl])
        model = cls(ModelConfig(**header["config"]))
        layout = [(n, off, tuple(shape)) for n, off, shape in header["layout"]]
        if layout != model.store.layout:
            raise ValueError(f"{path}: parameter layout does not match the model config")
        model.store.values[...] = np.frombuffer(raw, dtype="<f8", count=header["count"], offset=nl + 1)
        return model, int(header["step"])
