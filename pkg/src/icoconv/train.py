"""Reverse-mode differentiation, initialization, and training for mesh classifiers.

This is not a general autodiff system.  The layer vocabulary is fixed
(psi, phi, one_by_one, batchnorm, relu, avg_pool, orientation_pool,
global_pool, dense) and every backward pass is the hand-written adjoint of
the corresponding forward map, verified against central finite differences.

Shapes use a leading batch axis everywhere:
  spherical  (B, V, C)       raw input signals
  oriented   (B, V, N, C)    after the lifting layer
  pooled     (B, V, C)       after the orientation max
  flat       (B, C)          after global spatial pooling

Two execution modes: float64 (deterministic reference, used by all tests)
and float32 (faster, for larger runs).  Both are single-threaded through
numpy, so same-seed runs are bit-identical within a mode.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import CHECKPOINT_FORMAT_VERSION, REPORT_FORMAT_VERSION, __version__
from .harness import mesh_context
from .ioutil import atomic_write_bytes, atomic_write_text, csv_header_lines, pack_header, unpack_header
from .ops import (
    CyclicGroup,
    coefficient_matrix,
    offset_gathered_table,
    orientation_coefficients,
    pool_matrix,
)
from .icomesh import pool_map

CHECKPOINT_MAGIC = b"ICOCKPT\x00"

_KINDS = ("psi", "phi", "one_by_one", "batchnorm", "relu", "avg_pool", "orientation_pool", "global_pool", "dense")
_TRAINABLE = ("psi", "phi", "one_by_one", "dense")


class SpecError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    out: int | None = None

    def to_dict(self) -> dict:
        d = {"kind": self.kind}
        if self.out is not None:
            d["out"] = self.out
        return d


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description: input geometry plus an ordered layer list.

    n_orientations is the size of the cyclic orientation grid created by the
    lifting layer and consumed by every oriented layer after it.
    """

    level: int
    n_orientations: int
    in_channels: int
    layers: tuple[LayerSpec, ...]

    def to_dict(self) -> dict:
        return {
            "level": self.level,
            "n_orientations": self.n_orientations,
            "in_channels": self.in_channels,
            "layers": [l.to_dict() for l in self.layers],
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelSpec":
        layers = tuple(LayerSpec(l["kind"], l.get("out")) for l in d["layers"])
        return ModelSpec(int(d["level"]), int(d["n_orientations"]), int(d["in_channels"]), layers)


def validate_spec(spec: ModelSpec) -> list[dict]:
    """Walk the layer list checking shape compatibility.

    Returns one state dict per layer: {"state", "level", "channels", "in_channels"}
    describing the activation AFTER that layer; raises SpecError on the first
    inconsistency.
    """
    if spec.level < 1:
        raise SpecError("mesh level must be >= 1")
    if spec.n_orientations < 1:
        raise SpecError("orientation count must be >= 1")
    if spec.in_channels < 1:
        raise SpecError("input channel count must be >= 1")
    if not spec.layers:
        raise SpecError("model has no layers")
    if spec.layers[0].kind != "psi":
        raise SpecError("first layer must be psi (the lifting layer)")

    state, level, ch = "spherical", spec.level, spec.in_channels
    seen_orientation_pool = False
    out: list[dict] = []
    for idx, layer in enumerate(spec.layers):
        kind = layer.kind
        if kind not in _KINDS:
            raise SpecError(f"layer {idx}: unknown kind {kind!r}")
        if kind in _TRAINABLE and (layer.out is None or layer.out < 1):
            raise SpecError(f"layer {idx} ({kind}): needs a positive output channel count")
        cin = ch
        if kind == "psi":
            if state != "spherical":
                raise SpecError(f"layer {idx}: psi can only lift raw spherical input")
            state, ch = "oriented", layer.out
        elif kind == "phi":
            if state != "oriented":
                raise SpecError(f"layer {idx}: phi needs oriented input")
            ch = layer.out
        elif kind == "one_by_one":
            if state not in ("oriented", "pooled"):
                raise SpecError(f"layer {idx}: one_by_one needs oriented or pooled input")
            ch = layer.out
        elif kind == "batchnorm":
            if state == "flat":
                raise SpecError(f"layer {idx}: batchnorm not supported on flat features")
        elif kind == "relu":
            pass
        elif kind == "avg_pool":
            if state not in ("oriented", "pooled"):
                raise SpecError(f"layer {idx}: avg_pool needs mesh-shaped input")
            if level <= 1:
                raise SpecError(f"layer {idx}: cannot pool below level 1")
            level -= 1
        elif kind == "orientation_pool":
            if state != "oriented":
                raise SpecError(f"layer {idx}: orientation_pool needs oriented input")
            state = "pooled"
            seen_orientation_pool = True
        elif kind == "global_pool":
            if state != "pooled":
                raise SpecError(f"layer {idx}: global_pool needs orientation-pooled input")
            state = "flat"
        elif kind == "dense":
            if state != "flat":
                raise SpecError(f"layer {idx}: dense needs flat input (pool first)")
            if not seen_orientation_pool:
                raise SpecError(f"layer {idx}: dense heads require an orientation_pool earlier")
            ch = layer.out
        out.append({"state": state, "level": level, "channels": ch, "in_channels": cin})
    if spec.layers[-1].kind != "dense":
        raise SpecError("last layer must be dense (the classification head)")
    return out


class _FusedStencil:
    """All six stencil components as one sparse operator in a fixed dtype.

    Stacking (identity, d1, d2, d11, d12, d22) into a single (6V, V) matrix
    turns a feature evaluation into one sparse-dense product, and casting the
    operator once keeps 32-bit batches 32-bit end to end.
    """

    def __init__(self, stencils, dtype):
        import scipy.sparse as sp

        nv = stencils.n_vertices
        blocks = [sp.identity(nv, format="csr")] + list(stencils._operators())
        self.big = sp.vstack(blocks).tocsr().astype(dtype)
        self.big_t = self.big.T.tocsr()
        self.nv = nv

    def features(self, x: np.ndarray) -> np.ndarray:
        b, v, m = x.shape[0], x.shape[1], int(np.prod(x.shape[2:], dtype=int))
        flat = np.moveaxis(x.reshape(b, v, m), 1, 0).reshape(v, b * m)
        y = (self.big @ flat).reshape(6, v, b, m)
        return np.moveaxis(y, (0, 1), (2, 1)).reshape((b, v, 6) + x.shape[2:])

    def features_adjoint(self, g: np.ndarray) -> np.ndarray:
        b, v = g.shape[0], g.shape[1]
        m = int(np.prod(g.shape[3:], dtype=int))
        flat = np.moveaxis(g.reshape(b, v, 6, m), (2, 1), (0, 1)).reshape(6 * v, b * m)
        out = (self.big_t @ flat).reshape(v, b, m)
        return np.moveaxis(out, 0, 1).reshape((b, v) + g.shape[3:])


class Model:
    """A validated spec plus the mesh machinery each layer needs."""

    def __init__(self, spec: ModelSpec):
        self.spec = spec
        self.states = validate_spec(spec)
        self.group = CyclicGroup(spec.n_orientations)
        levels = {spec.level} | {s["level"] for s in self.states}
        self.ctx = {lvl: mesh_context(lvl) for lvl in sorted(levels)}
        self._fused = {}
        # pool operators (and their adjoints) per avg_pool layer, keyed by fine level
        self.pools = {}
        for idx, layer in enumerate(spec.layers):
            if layer.kind == "avg_pool":
                fine = self.states[idx]["level"] + 1
                if fine not in self.pools:
                    pm = pool_map(self.ctx[fine].mesh, self.ctx[fine - 1].mesh)
                    mat = pool_matrix(pm, self.ctx[fine].mesh.n_vertices)
                    self.pools[fine] = (mat, mat.T.tocsr())

    def fused_stencil(self, level: int, dtype) -> _FusedStencil:
        key = (level, np.dtype(dtype).str)
        if key not in self._fused:
            self._fused[key] = _FusedStencil(self.ctx[level].stencils, dtype)
        return self._fused[key]

    @property
    def n_classes(self) -> int:
        return self.states[-1]["channels"]

    def describe(self) -> str:
        rows = [f"input: level {self.spec.level}, {self.spec.in_channels} channels, N={self.spec.n_orientations}"]
        for layer, st in zip(self.spec.layers, self.states):
            rows.append(f"  {layer.kind:17s} -> {st['state']:9s} level {st['level']} x {st['channels']} ch")
        return "\n".join(rows)


# ---------------------------------------------------------------------------
# parameters


def init_weights(model: Model, seed: int, dtype=np.float64) -> list[dict]:
    """Per-layer parameter dicts; deterministic in the seed.

    Stencil-based layers cannot use textbook fan-in rules: the derivative
    components the stencil produces have wildly different scales (value O(1),
    first derivatives O(1/h), second O(1/h^2) on rough input).  So the scale
    of each weight component is set empirically by probing the layer's
    stencil map with white noise and budgeting an equal share of unit output
    variance to the value, gradient, and second-order blocks.  Within the
    second-order block the (pure, mixed, pure) variances are tied as
    (s^2, 2 s^2, s^2), which the in-plane rotation of the weight vector
    preserves exactly, so initialization statistics do not depend on the
    orientation slot.
    """
    rng = np.random.default_rng(seed)
    weights: list[dict] = []
    for layer, st in zip(model.spec.layers, model.states):
        kind, cin, cout = layer.kind, st["in_channels"], st["channels"]
        if kind == "psi" or kind == "phi":
            lvl = st["level"]
            scales = _component_scales(model.ctx[lvl].stencils, rng)
            gain = 1.0 / cin if kind == "psi" else model.group.n / cin
            std = np.sqrt(gain) * scales
            if kind == "psi":
                w = rng.standard_normal((cout, cin, 6)) * std
            else:
                w = rng.standard_normal((cout, cin, model.group.n, 6)) * std
            weights.append({"w": w.astype(dtype), "b": np.zeros(cout, dtype)})
        elif kind == "one_by_one":
            w = rng.standard_normal((cout, cin)) / np.sqrt(cin)
            weights.append({"w": w.astype(dtype), "b": np.zeros(cout, dtype)})
        elif kind == "batchnorm":
            weights.append(
                {
                    "scale": np.ones(cout, dtype),
                    "bias": np.zeros(cout, dtype),
                    "running_mean": np.zeros(cout, dtype),
                    "running_var": np.ones(cout, dtype),
                }
            )
        elif kind == "dense":
            bound = np.sqrt(6.0 / (cin + cout))
            w = rng.uniform(-bound, bound, size=(cout, cin))
            weights.append({"w": w.astype(dtype), "b": np.zeros(cout, dtype)})
        else:
            weights.append({})
    return weights


_TRAINABLE_KEYS = {"psi": ("w", "b"), "phi": ("w", "b"), "one_by_one": ("w", "b"), "dense": ("w", "b"), "batchnorm": ("scale", "bias")}


def _component_scales(stencils, rng, n_probe: int = 32) -> np.ndarray:
    """Weight std per derivative component for unit output variance on white noise."""
    x = rng.standard_normal((n_probe, stencils.n_vertices, 1))
    g = stencils.features(x)[..., 0]  # (n_probe, V, 6)
    v = np.mean(g * g, axis=(0, 1))
    s = np.empty(6)
    s[0] = np.sqrt(1.0 / (6.0 * v[0]))
    s[1] = s[2] = np.sqrt(2.0 / (6.0 * (v[1] + v[2])))
    s46 = np.sqrt(3.0 / (6.0 * (v[3] + 2.0 * v[4] + v[5])))
    s[3] = s[5] = s46
    s[4] = np.sqrt(2.0) * s46
    return s


def trainable_entries(model: Model, weights: list[dict]) -> list[tuple[int, str]]:
    out = []
    for i, layer in enumerate(model.spec.layers):
        for key in _TRAINABLE_KEYS.get(layer.kind, ()):
            out.append((i, key))
    return out


def flatten_params(model: Model, weights: list[dict]) -> np.ndarray:
    return np.concatenate([weights[i][k].ravel() for i, k in trainable_entries(model, weights)])


def unflatten_params(model: Model, weights: list[dict], vec: np.ndarray) -> list[dict]:
    entries = trainable_entries(model, weights)
    need = sum(weights[i][k].size for i, k in entries)
    if vec.size != need:
        raise ValueError(f"parameter vector has {vec.size} entries, model needs {need}")
    out = [dict(w) for w in weights]
    pos = 0
    for i, k in entries:
        arr = weights[i][k]
        out[i][k] = vec[pos : pos + arr.size].reshape(arr.shape).astype(arr.dtype)
        pos += arr.size
    return out


def parameter_count(model: Model, weights: list[dict]) -> int:
    return int(sum(weights[i][k].size for i, k in trainable_entries(model, weights)))


# ---------------------------------------------------------------------------
# forward / backward

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def forward(model: Model, weights: list[dict], x: np.ndarray, training: bool = False,
            frozen: list | None = None) -> tuple[np.ndarray, list]:
    """Run the network; returns (logits, caches) where caches feed backward().

    In training mode batchnorm uses batch statistics and updates the running
    buffers in place.  Raises TrainingDiverged naming the first layer whose
    output is not finite.

    frozen, if given, is a cache list from a previous run: relu masks and
    orientation argmax choices are reused from it instead of recomputed, so
    the run evaluates the same smooth piece of the piecewise landscape.  The
    finite-difference gradient check needs this; nothing else should.
    """
    if x.ndim == 2:
        x = x[..., None]
    if x.ndim != 3:
        raise ValueError(f"input must be (B, V) or (B, V, C), got shape {x.shape}")
    if x.shape[1] != model.ctx[model.spec.level].mesh.n_vertices:
        raise ValueError(f"input has {x.shape[1]} vertices, level {model.spec.level} expects "
                         f"{model.ctx[model.spec.level].mesh.n_vertices}")
    if x.shape[2] != model.spec.in_channels:
        raise ValueError(f"input has {x.shape[2]} channels, model expects {model.spec.in_channels}")
    caches: list = []
    group = model.group
    dtype = x.dtype
    for idx, (layer, st) in enumerate(zip(model.spec.layers, model.states)):
        kind, wts = layer.kind, weights[idx]
        if kind == "psi":
            # fused stencil operator is cast once, so 32-bit batches stay 32-bit
            g = model.fused_stencil(st["level"], dtype).features(x)
            table = orientation_coefficients(wts["w"], group).astype(dtype)  # (n, O, C, 6)
            out = np.einsum("bvkc,iock->bvio", g, table, optimize=True) + wts["b"]
            caches.append({"g": g, "table": table})
        elif kind == "phi":
            n = group.n
            g = model.fused_stencil(st["level"], dtype).features(x)
            table = orientation_coefficients(wts["w"], group).astype(dtype)  # (i, O, C, j, 6)
            t2 = offset_gathered_table(table, n)  # (i, m, O, C, 6)
            out = np.einsum("bvkmc,imock->bvio", g, t2, optimize=True) / n + wts["b"]
            caches.append({"g": g, "t2": t2})
        elif kind == "one_by_one":
            out = x @ wts["w"].T + wts["b"]
            caches.append({"x": x})
        elif kind == "batchnorm":
            axes = tuple(range(x.ndim - 1))
            if training:
                mean = x.mean(axis=axes)
                var = x.var(axis=axes)
                wts["running_mean"] += BN_MOMENTUM * (mean - wts["running_mean"])
                wts["running_var"] += BN_MOMENTUM * (var - wts["running_var"])
            else:
                mean, var = wts["running_mean"], wts["running_var"]
            inv = 1.0 / np.sqrt(var + BN_EPS)
            xhat = (x - mean) * inv
            out = wts["scale"] * xhat + wts["bias"]
            caches.append({"xhat": xhat, "inv": inv, "axes": axes, "training": training})
        elif kind == "relu":
            mask = frozen[idx]["mask"] if frozen is not None else x > 0.0
            out = x * mask
            caches.append({"mask": mask})
        elif kind == "avg_pool":
            mat, mat_t = model.pools[st["level"] + 1]
            b = x.shape[0]
            flat = x.reshape(b, x.shape[1], -1)
            out = (mat @ flat.transpose(1, 0, 2).reshape(x.shape[1], -1))
            out = out.reshape(mat.shape[0], b, -1).transpose(1, 0, 2).reshape((b, mat.shape[0]) + x.shape[2:])
            caches.append({"mat_t": mat_t, "shape": x.shape})
        elif kind == "orientation_pool":
            arg = frozen[idx]["arg"] if frozen is not None else np.argmax(x, axis=2)
            out = np.take_along_axis(x, arg[:, :, None, :], axis=2)[:, :, 0, :]
            caches.append({"arg": arg, "n": x.shape[2]})
        elif kind == "global_pool":
            out = x.mean(axis=1)
            caches.append({"v": x.shape[1]})
        elif kind == "dense":
            out = x @ wts["w"].T + wts["b"]
            caches.append({"x": x})
        else:  # pragma: no cover - validate_spec rejects these
            raise SpecError(f"unknown layer kind {kind}")
        out = np.asarray(out, dtype)
        if not np.all(np.isfinite(out)):
            raise TrainingDiverged(f"non-finite activation after layer {idx} ({kind})")
        x = out
    return x, caches


def backward(model: Model, weights: list[dict], caches: list, dlogits: np.ndarray) -> list[dict]:
    """Exact adjoint of forward(); returns per-layer gradient dicts."""
    grads: list[dict] = [dict() for _ in model.spec.layers]
    dx = dlogits
    dtype = dlogits.dtype
    group = model.group
    for idx in range(len(model.spec.layers) - 1, -1, -1):
        layer, st, cache, wts = model.spec.layers[idx], model.states[idx], caches[idx], weights[idx]
        kind = layer.kind
        if kind == "psi":
            g, table = cache["g"], cache["table"]
            grads[idx]["b"] = dx.sum(axis=(0, 1, 2))
            dtable = np.einsum("bvkc,bvio->iock", g, dx, optimize=True)
            tmat = coefficient_matrix(group.angles).astype(dx.dtype)
            grads[idx]["w"] = np.einsum("ikl,iock->ocl", tmat, dtable)
            dg = np.einsum("bvio,iock->bvkc", dx, table, optimize=True)
            dx = model.fused_stencil(st["level"], dg.dtype).features_adjoint(dg)
        elif kind == "phi":
            g, t2 = cache["g"], cache["t2"]
            n = group.n
            grads[idx]["b"] = dx.sum(axis=(0, 1, 2))
            dxn = dx / n
            tmat = coefficient_matrix(group.angles).astype(dx.dtype)
            dt2 = np.einsum("bvkmc,bvio->imock", g, dxn, optimize=True)
            # undo the offset gather: dtable[i, j] = dt2[i, (i + j) mod n]
            ii = np.arange(n)[:, None]
            jj = np.arange(n)[None, :]
            dtable = dt2[ii, (ii + jj) % n]  # (i, j, O, C, 6)
            grads[idx]["w"] = np.einsum("ikl,ijock->ocjl", tmat, dtable, optimize=True)
            dg = np.einsum("bvio,imock->bvkmc", dxn, t2, optimize=True)
            dx = model.fused_stencil(st["level"], dg.dtype).features_adjoint(dg)
        elif kind == "one_by_one":
            x = cache["x"]
            d2 = dx.reshape(-1, dx.shape[-1])
            grads[idx]["b"] = d2.sum(axis=0)
            grads[idx]["w"] = d2.T @ x.reshape(-1, x.shape[-1])
            dx = (d2 @ wts["w"]).reshape(x.shape)
        elif kind == "batchnorm":
            xhat, inv, axes = cache["xhat"], cache["inv"], cache["axes"]
            grads[idx]["scale"] = (dx * xhat).sum(axis=axes)
            grads[idx]["bias"] = dx.sum(axis=axes)
            dxhat = dx * wts["scale"]
            if cache["training"]:
                m = xhat.size // xhat.shape[-1]
                dx = inv / m * (m * dxhat - dxhat.sum(axis=axes) - xhat * (dxhat * xhat).sum(axis=axes))
            else:
                dx = dxhat * inv
        elif kind == "relu":
            dx = dx * cache["mask"]
        elif kind == "avg_pool":
            mat_t, shape = cache["mat_t"], cache["shape"]
            b = dx.shape[0]
            flat = dx.reshape(b, dx.shape[1], -1)
            out = mat_t @ flat.transpose(1, 0, 2).reshape(dx.shape[1], -1)
            dx = out.reshape(shape[1], b, -1).transpose(1, 0, 2).reshape(shape)
        elif kind == "orientation_pool":
            arg, n = cache["arg"], cache["n"]
            full = np.zeros(dx.shape[:2] + (n,) + dx.shape[2:], dx.dtype)
            np.put_along_axis(full, arg[:, :, None, :], dx[:, :, None, :], axis=2)
            dx = full
        elif kind == "global_pool":
            v = cache["v"]
            dx = np.repeat(dx[:, None, :] / v, v, axis=1)
        elif kind == "dense":
            x = cache["x"]
            grads[idx]["b"] = dx.sum(axis=0)
            grads[idx]["w"] = dx.T @ x
            dx = dx @ wts["w"]
        dx = np.asarray(dx, dtype)
        if not np.all(np.isfinite(dx)):
            raise TrainingDiverged(f"non-finite gradient below layer {idx} ({kind})")
    return grads


# ---------------------------------------------------------------------------
# loss and metrics


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient wrt logits."""
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    loss = -logp[np.arange(n), labels].mean()
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    return float(loss), dlogits / n


def accuracy(logits: np.ndarray, labels: np.ndarray) -> float:
    return float((logits.argmax(axis=1) == labels).mean())


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: list[dict] = field(default_factory=list)
    v: list[dict] = field(default_factory=list)
    t: int = 0


def adam_init(model: Model, weights: list[dict]) -> AdamState:
    st = AdamState()
    for wts in weights:
        st.m.append({k: np.zeros_like(a) for k, a in wts.items()})
        st.v.append({k: np.zeros_like(a) for k, a in wts.items()})
    return st


def adam_step(model: Model, weights, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for i, key in trainable_entries(model, weights):
        g = grads[i].get(key)
        if g is None:
            continue
        m = state.m[i][key]
        v = state.v[i][key]
        m += (1.0 - beta1) * (g - m)
        v += (1.0 - beta2) * (g * g - v)
        weights[i][key] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# training loop


_CONFIG_DEFAULTS = {
    "lr": 0.01,
    "batch": 32,
    "epochs": 20,
    "decay": 0.5,
    "decay_every": 10,
    "seed": 0,
    "dtype": "float64",
}


def parse_config(text: str) -> dict:
    """Flat key=value config; '#' starts a comment, unknown keys rejected."""
    cfg = dict(_CONFIG_DEFAULTS)
    for ln, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected key=value, got {raw!r}")
        key, val = (p.strip() for p in line.split("=", 1))
        if key not in cfg:
            raise ValueError(f"config line {ln}: unknown key {key!r}")
        cur = _CONFIG_DEFAULTS[key]
        if isinstance(cur, int) and not isinstance(cur, bool):
            cfg[key] = int(val)
        elif isinstance(cur, float):
            cfg[key] = float(val)
        else:
            cfg[key] = val
    if cfg["dtype"] not in ("float64", "float32"):
        raise ValueError(f"dtype must be float64 or float32, got {cfg['dtype']!r}")
    return cfg


def load_config(path: str) -> dict:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def evaluate(model: Model, weights: list[dict], x: np.ndarray, y: np.ndarray, batch: int = 64) -> tuple[float, float]:
    """(mean loss, accuracy) over a dataset in eval mode."""
    losses, hits, n = [], 0, x.shape[0]
    for start in range(0, n, batch):
        xb = x[start : start + batch]
        yb = y[start : start + batch]
        logits, _ = forward(model, weights, xb, training=False)
        loss, _ = softmax_cross_entropy(logits, yb)
        losses.append(loss * xb.shape[0])
        hits += int((logits.argmax(axis=1) == yb).sum())
    return float(np.sum(losses) / n), hits / n


def train_classifier(
    model: Model,
    train_x: np.ndarray,
    train_y: np.ndarray,
    config: dict | None = None,
    val_x: np.ndarray | None = None,
    val_y: np.ndarray | None = None,
    out_dir: str | None = None,
    weights: list[dict] | None = None,
    log=None,
) -> tuple[list[dict], list[dict]]:
    """Adam training with step learning-rate decay.

    Returns (weights, metrics) where metrics has one dict per epoch.  When
    out_dir is given, writes a checkpoint per epoch plus metrics.csv.  A
    non-finite loss aborts with the offending epoch and step in the message.
    """
    cfg = dict(_CONFIG_DEFAULTS)
    cfg.update(config or {})
    dtype = np.float64 if cfg["dtype"] == "float64" else np.float32
    rng = np.random.default_rng(cfg["seed"])
    if weights is None:
        weights = init_weights(model, cfg["seed"], dtype)
    train_x = np.ascontiguousarray(train_x, dtype)
    train_y = np.asarray(train_y)
    if train_x.ndim == 2:
        train_x = train_x[..., None]
    if train_x.shape[0] != train_y.shape[0]:
        raise ValueError("signal and label counts differ")
    if train_y.size and (train_y.min() < 0 or train_y.max() >= model.n_classes):
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    state = adam_init(model, weights)
    metrics: list[dict] = []
    n = train_x.shape[0]
    batch = int(cfg["batch"])
    for epoch in range(int(cfg["epochs"])):
        lr = cfg["lr"] * cfg["decay"] ** (epoch // int(cfg["decay_every"]))
        order = rng.permutation(n)
        ep_loss, ep_hits = 0.0, 0
        for step, start in enumerate(range(0, n, batch)):
            sel = order[start : start + batch]
            xb, yb = train_x[sel], train_y[sel]
            try:
                logits, caches = forward(model, weights, xb, training=True)
                loss, dlogits = softmax_cross_entropy(logits, yb)
                if not np.isfinite(loss):
                    raise TrainingDiverged("loss is not finite")
                grads = backward(model, weights, caches, dlogits.astype(dtype))
            except TrainingDiverged as exc:
                raise TrainingDiverged(
                    f"diverged at epoch {epoch} step {step} (lr={lr:g}): {exc}"
                ) from exc
            adam_step(model, weights, grads, state, lr)
            ep_loss += loss * xb.shape[0]
            ep_hits += int((logits.argmax(axis=1) == yb).sum())
        row = {"epoch": epoch, "lr": lr, "train_loss": ep_loss / n, "train_acc": ep_hits / n}
        if val_x is not None:
            vloss, vacc = evaluate(model, weights, np.ascontiguousarray(val_x, dtype), val_y)
            row["val_loss"], row["val_acc"] = vloss, vacc
        metrics.append(row)
        if log is not None:
            log(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in row.items()))
        if out_dir is not None:
            save_checkpoint(os.path.join(out_dir, f"checkpoint_{epoch:03d}.ckpt"), model.spec, weights,
                            seed=cfg["seed"], epoch=epoch)
    if out_dir is not None:
        save_checkpoint(os.path.join(out_dir, "final.ckpt"), model.spec, weights, seed=cfg["seed"],
                        epoch=int(cfg["epochs"]) - 1)
        write_metrics_csv(os.path.join(out_dir, "metrics.csv"), metrics, seed=cfg["seed"])
    return weights, metrics


def write_metrics_csv(path: str, metrics: list[dict], seed: int | None = None) -> None:
    cols = list(metrics[0]) if metrics else ["epoch", "lr", "train_loss", "train_acc"]
    lines = csv_header_lines(REPORT_FORMAT_VERSION, seed)
    lines.append(",".join(cols))
    for row in metrics:
        lines.append(",".join(f"{row[c]:.10g}" if isinstance(row[c], float) else str(row[c]) for c in cols))
    atomic_write_text(path, "\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str, spec: ModelSpec, weights: list[dict], seed: int | None = None, **meta) -> None:
    """Versioned binary checkpoint: JSON header then raw little-endian blobs."""
    entries = []
    blobs = []
    for i, wts in enumerate(weights):
        for key in sorted(wts):
            arr = np.ascontiguousarray(wts[key])
            code = {"float64": "f8", "float32": "f4"}[str(arr.dtype)]
            entries.append({"layer": i, "key": key, "dtype": code, "shape": list(arr.shape)})
            blobs.append(arr.astype("<" + code, copy=False).tobytes())
    head = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "tool_version": __version__,
        "seed": seed,
        "model": spec.to_dict(),
        "entries": entries,
    }
    head.update(meta)
    atomic_write_bytes(path, pack_header(head, CHECKPOINT_MAGIC) + b"".join(blobs))


def load_checkpoint(path: str) -> tuple[ModelSpec, list[dict], dict]:
    with open(path, "rb") as fh:
        payload = fh.read()
    head, off = unpack_header(payload, CHECKPOINT_MAGIC)
    if head["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"checkpoint format {head['format_version']} not supported")
    spec = ModelSpec.from_dict(head["model"])
    weights: list[dict] = [dict() for _ in spec.layers]
    for ent in head["entries"]:
        count = int(np.prod(ent["shape"])) if ent["shape"] else 1
        dt = np.dtype("<" + ent["dtype"])
        end = off + count * dt.itemsize
        if end > len(payload):
            raise ValueError("checkpoint truncated")
        arr = np.frombuffer(payload[off:end], dtype=dt).reshape(ent["shape"])
        weights[ent["layer"]][ent["key"]] = arr.astype(dt.newbyteorder("="))
        off = end
    if off != len(payload):
        raise ValueError("checkpoint has trailing bytes")
    return spec, weights, head


# ---------------------------------------------------------------------------
# stock architectures


def small_bump_classifier(level: int = 3, n_classes: int = 4, n_orientations: int = 8) -> ModelSpec:
    """Compact rotation-robust classifier for the synthetic bump task (~15k params)."""
    return ModelSpec(
        level=level,
        n_orientations=n_orientations,
        in_channels=1,
        layers=(
            LayerSpec("psi", 8),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("avg_pool"),
            LayerSpec("phi", 12),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("phi", 16),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("orientation_pool"),
            LayerSpec("global_pool"),
            LayerSpec("dense", n_classes),
        ),
    )


def digit_classifier(level: int = 4, n_classes: int = 10, n_orientations: int = 16) -> ModelSpec:
    """Digit-classification model (~73k params) with three oriented conv blocks."""
    return ModelSpec(
        level=level,
        n_orientations=n_orientations,
        in_channels=1,
        layers=(
            LayerSpec("psi", 8),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("phi", 12),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("avg_pool"),
            LayerSpec("phi", 16),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("avg_pool"),
            LayerSpec("phi", 28),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("orientation_pool"),
            LayerSpec("global_pool"),
            LayerSpec("dense", n_classes),
        ),
    )


def tiny_gradcheck_model(level: int = 2, n_classes: int = 3, n_orientations: int = 4) -> ModelSpec:
    """Smallest spec exercising every layer kind once; used by gradient checks."""
    return ModelSpec(
        level=level,
        n_orientations=n_orientations,
        in_channels=2,
        layers=(
            LayerSpec("psi", 3),
            LayerSpec("batchnorm"),
            LayerSpec("relu"),
            LayerSpec("phi", 4),
            LayerSpec("one_by_one", 3),
            LayerSpec("relu"),
            LayerSpec("avg_pool"),
            LayerSpec("orientation_pool"),
            LayerSpec("global_pool"),
            LayerSpec("dense", n_classes),
        ),
    )


# ---------------------------------------------------------------------------
# gradient checking


def gradcheck(model: Model, n_params: int = 5, seed: int = 0, h: float = 1e-4,
              batch: int = 4) -> tuple[float, list[dict]]:
    """Compare backprop gradients with central finite differences.

    Probes n_params randomly chosen parameters of a freshly initialized model
    on a random batch; returns (max relative error, per-probe rows).
    Batchnorm runs in training mode so the probe covers the batch-statistics
    path.  Running-stat updates are suppressed by restoring buffers around
    every forward call.

    h is a relative step: the actual perturbation is h times the RMS of the
    probed weight's component column (or h alone for all-zero columns such as
    fresh biases).  Stencil-layer components differ in natural scale by
    orders of magnitude, so a fixed absolute step would be a large relative
    kick to second-order components and truncation error would swamp the
    comparison.

    The loss is only piecewise smooth (relu, orientation max), and the
    gradient the backward pass computes is the derivative of the piece active
    at the base point.  The probes therefore run with the base point's relu
    masks and argmax choices frozen; an unfrozen probe would occasionally
    straddle a kink and measure a slope no gradient definition matches.
    """
    rng = np.random.default_rng(seed)
    weights = init_weights(model, seed)
    v = model.ctx[model.spec.level].mesh.n_vertices
    x = rng.standard_normal((batch, v, model.spec.in_channels))
    y = rng.integers(0, model.n_classes, size=batch)

    logits, caches = forward(model, weights, x, training=True)
    _, dlogits = softmax_cross_entropy(logits, y)
    grads = backward(model, weights, caches, dlogits)

    def loss_at() -> float:
        # forward in training mode mutates batchnorm running buffers; restore
        # them in place so repeated probes see identical state
        buffers = [(w[k], w[k].copy()) for w in weights for k in ("running_mean", "running_var") if k in w]
        out, _ = forward(model, weights, x, training=True, frozen=caches)
        for buf, copy in buffers:
            buf[...] = copy
        return softmax_cross_entropy(out, y)[0]

    entries = trainable_entries(model, weights)
    rows = []
    worst = 0.0
    for _ in range(n_params):
        li, key = entries[rng.integers(len(entries))]
        arr = weights[li][key]
        flat_idx = int(rng.integers(arr.size))
        col = arr.reshape(-1, arr.shape[-1])[:, flat_idx % arr.shape[-1]]
        rms = float(np.sqrt(np.mean(col * col)))
        step = h * (rms if rms > 0.0 else 1.0)
        orig = arr.flat[flat_idx]
        arr.flat[flat_idx] = orig + step
        up = loss_at()
        arr.flat[flat_idx] = orig - step
        down = loss_at()
        arr.flat[flat_idx] = orig
        fd = (up - down) / (2.0 * step)
        an = grads[li][key].flat[flat_idx]
        # floor the denominator well above FD roundoff (~1e-12): parameters
        # with exactly zero gradient (e.g. biases feeding batchnorm) must
        # compare as equal, not as noise over noise
        rel = abs(an - fd) / max(abs(an), abs(fd), 1e-6)
        rows.append({"layer": li, "key": key, "index": flat_idx, "analytic": float(an),
                     "numeric": float(fd), "rel_err": float(rel)})
        worst = max(worst, rel)
    return worst, rows
