"""MLP / GCN regressors that predict performance or cost from an encoding."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .errors import CheckpointError, ShapeError
from .space import SSS, SpaceDef, encode, space_from_dict

CHECKPOINT_FORMAT = "predsearch-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class PredictorSpec:
    kind: str  # "MLP" or "GCN"
    input_dim: tuple
    mlp_width: int = 1000
    mlp_layers: int = 3
    gcn_width: int = 144
    gcn_layers: int = 3
    fc_width: int = 128
    dropout: float = 0.05

    @classmethod
    def for_space(cls, space: SpaceDef, **kw) -> "PredictorSpec":
        kind = "MLP" if space.kind == SSS else "GCN"
        return cls(kind=kind, input_dim=tuple(space.encoding_shape), **kw)


@dataclass(frozen=True)
class TrainingSample:
    arch: object
    performance: float
    cost: float

    def __post_init__(self):
        if not math.isfinite(self.performance):
            raise ValueError("performance must be finite")
        if not self.cost > 0:
            raise ValueError("cost must be positive")


@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float
    constant: bool = False

    @classmethod
    def fit(cls, y) -> "NormStats":
        y = np.asarray(y, dtype=np.float64)
        std = float(y.std())
        if not std > 1e-12 * max(1.0, abs(float(y.mean()))):
            return cls(float(y.mean()), 1.0, True)
        return cls(float(y.mean()), std)

    def normalize(self, v):
        return (np.asarray(v, dtype=np.float64) - self.mean) / self.std

    def denormalize(self, s):
        return self.mean + self.std * np.asarray(s, dtype=np.float64)


def gcn_layer(J, V, W1, W2):
    """``0.5*relu(J V W1) + 0.5*relu(J^T V W2)``; ``V`` may carry a batch axis."""
    out, _ = gcn_layer_forward(J, V, W1, W2)
    return out


def _mix(J, V):
    """``J @ V`` for ``V`` of shape ``(n, d)`` or ``(B, n, d)``."""
    if V.ndim == 2:
        return J @ V
    B, n, d = V.shape
    return (J @ V.transpose(1, 0, 2).reshape(n, B * d)).reshape(n, B, d).transpose(1, 0, 2)


def _dense(V, W):
    """``V @ W`` over the last axis, as one 2-D product."""
    return (V.reshape(-1, V.shape[-1]) @ W).reshape(V.shape[:-1] + (W.shape[1],))


def gcn_layer_forward(J, V, W1, W2):
    n = J.shape[0]
    if J.shape != (n, n) or V.shape[-2] != n or W1.shape != W2.shape or V.shape[-1] != W1.shape[0]:
        raise ShapeError(f"gcn_layer: J{J.shape} V{V.shape} W1{W1.shape} W2{W2.shape}")
    JV = _mix(J, V)
    JtV = _mix(J.T, V)
    P1 = _dense(JV, W1)
    P2 = _dense(JtV, W2)
    out = 0.5 * np.maximum(P1, 0.0) + 0.5 * np.maximum(P2, 0.0)
    return out, (J, JV, JtV, W1, W2, P1, P2)


def gcn_layer_backward(dy, cache, param_grads=True):
    J, JV, JtV, W1, W2, P1, P2 = cache
    d1 = 0.5 * dy * (P1 > 0)
    d2 = 0.5 * dy * (P2 > 0)
    dV = _mix(J.T, _dense(d1, W1.T)) + _mix(J, _dense(d2, W2.T))
    if not param_grads:
        return dV, None, None
    d_in = W1.shape[0]
    dW1 = JV.reshape(-1, d_in).T @ d1.reshape(-1, d1.shape[-1])
    dW2 = JtV.reshape(-1, d_in).T @ d2.reshape(-1, d2.shape[-1])
    return dV, dW1, dW2


def _uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class MLPNet:
    """``mlp_layers`` x (affine + GeLU), dropout, then a scalar affine head."""

    def __init__(self, spec: PredictorSpec):
        self.spec = spec

    def layer_names(self):
        names = []
        for i in range(self.spec.mlp_layers + 1):
            names += [f"fc{i}.W", f"fc{i}.b"]
        return names

    def init(self, rng):
        d = self.spec.input_dim[0]
        dims = [d] + [self.spec.mlp_width] * self.spec.mlp_layers + [1]
        params = {}
        for i in range(len(dims) - 1):
            params[f"fc{i}.W"] = _uniform(rng, dims[i], (dims[i], dims[i + 1]))
            params[f"fc{i}.b"] = _uniform(rng, dims[i], (dims[i + 1],))
        return params

    def forward(self, params, X, train=False, rng=None):
        caches = []
        h = X
        L = self.spec.mlp_layers
        for i in range(L):
            h, ca = T.affine_forward(h, params[f"fc{i}.W"], params[f"fc{i}.b"])
            h, cg = T.gelu_forward(h)
            caches.append((ca, cg))
        h, mask = T.dropout_forward(h, self.spec.dropout, train, rng)
        out, cl = T.affine_forward(h, params[f"fc{L}.W"], params[f"fc{L}.b"])
        return out[:, 0], (caches, mask, cl)

    def backward(self, dout, cache, params, param_grads=True):
        caches, mask, cl = cache
        L = self.spec.mlp_layers
        grads = {}
        dh, grads[f"fc{L}.W"], grads[f"fc{L}.b"] = T.affine_backward(dout[:, None], cl, param_grads)
        dh = T.dropout_backward(dh, mask)
        for i in reversed(range(L)):
            ca, cg = caches[i]
            dh = T.gelu_backward(dh, cg)
            dh, grads[f"fc{i}.W"], grads[f"fc{i}.b"] = T.affine_backward(dh, ca, param_grads)
        return (grads if param_grads else {}), dh


class GCNNet:
    """Graph layers on the softmaxed operation matrix, mean readout, two FC layers."""

    def __init__(self, spec: PredictorSpec, adjacency, interior_mask):
        self.spec = spec
        A = np.asarray(adjacency, dtype=np.float64)
        self.J = A + np.eye(A.shape[0])
        self.interior = np.asarray(interior_mask, dtype=bool)

    def layer_names(self):
        names = []
        for l in range(self.spec.gcn_layers):
            names += [f"gcn{l}.W1", f"gcn{l}.W2"]
        return names + ["fc0.W", "fc0.b", "fc1.W", "fc1.b"]

    def init(self, rng):
        n_opt = self.spec.input_dim[1]
        width = self.spec.gcn_width
        params = {}
        d_in = n_opt
        for l in range(self.spec.gcn_layers):
            params[f"gcn{l}.W1"] = _uniform(rng, d_in, (d_in, width))
            params[f"gcn{l}.W2"] = _uniform(rng, d_in, (d_in, width))
            d_in = width
        params["fc0.W"] = _uniform(rng, width, (width, self.spec.fc_width))
        params["fc0.b"] = _uniform(rng, width, (self.spec.fc_width,))
        params["fc1.W"] = _uniform(rng, self.spec.fc_width, (self.spec.fc_width, 1))
        params["fc1.b"] = _uniform(rng, self.spec.fc_width, (1,))
        return params

    def forward(self, params, X, train=False, rng=None):
        p = self.spec.dropout
        soft, sm_cache = T.softmax_forward(X[:, self.interior, :])
        V = X.copy()
        V[:, self.interior, :] = soft
        layer_caches = []
        for l in range(self.spec.gcn_layers):
            V, cg = gcn_layer_forward(self.J, V, params[f"gcn{l}.W1"], params[f"gcn{l}.W2"])
            V, mask = T.dropout_forward(V, p, train, rng)
            layer_caches.append((cg, mask))
        pooled = V.mean(axis=1)
        h, c0 = T.affine_forward(pooled, params["fc0.W"], params["fc0.b"])
        h, cgel = T.gelu_forward(h)
        h, m0 = T.dropout_forward(h, p, train, rng)
        out, c1 = T.affine_forward(h, params["fc1.W"], params["fc1.b"])
        return out[:, 0], (sm_cache, layer_caches, V.shape[1], c0, cgel, m0, c1)

    def backward(self, dout, cache, params, param_grads=True):
        sm_cache, layer_caches, n_nodes, c0, cgel, m0, c1 = cache
        grads = {}
        dh, grads["fc1.W"], grads["fc1.b"] = T.affine_backward(dout[:, None], c1, param_grads)
        dh = T.dropout_backward(dh, m0)
        dh = T.gelu_backward(dh, cgel)
        dpooled, grads["fc0.W"], grads["fc0.b"] = T.affine_backward(dh, c0, param_grads)
        dV = np.repeat(dpooled[:, None, :] / n_nodes, n_nodes, axis=1)
        for l in reversed(range(self.spec.gcn_layers)):
            cg, mask = layer_caches[l]
            dV = T.dropout_backward(dV, mask)
            dV, grads[f"gcn{l}.W1"], grads[f"gcn{l}.W2"] = gcn_layer_backward(dV, cg, param_grads)
        dX = np.zeros_like(dV)
        # frozen input/output rows receive no gradient
        dX[:, self.interior, :] = T.softmax_backward(dV[:, self.interior, :], sm_cache)
        return (grads if param_grads else {}), dX


def build_net(spec: PredictorSpec, space: SpaceDef):
    if spec.kind == "MLP":
        return MLPNet(spec)
    if spec.kind == "GCN":
        return GCNNet(spec, space.adjacency, space.interior_mask())
    raise ValueError(f"unknown predictor kind {spec.kind!r}")


@dataclass
class Predictor:
    """A trained regressor plus the statistics that undo target standardization."""

    spec: PredictorSpec
    space: SpaceDef
    params: dict
    stats: NormStats
    role: str = "main"
    net: object = field(init=False, repr=False)

    def __post_init__(self):
        self.net = build_net(self.spec, self.space)

    def n_params(self) -> int:
        return sum(p.size for p in self.params.values())

    def _batch(self, X):
        X = np.asarray(X, dtype=np.float64)
        single = X.shape == tuple(self.spec.input_dim)
        if single:
            X = X[None]
        if X.shape[1:] != tuple(self.spec.input_dim):
            raise ShapeError(f"encoding shape {X.shape[1:]} != {tuple(self.spec.input_dim)}")
        return X, single

    def forward(self, X, train=False, rng=None):
        """Scores in standardized-target units."""
        X, single = self._batch(X)
        out, _ = self.net.forward(self.params, X, train, rng)
        return out[0] if single else out

    def value_and_grad(self, X):
        """Eval-mode scores and d(score)/d(encoding), row by row."""
        X, single = self._batch(X)
        out, cache = self.net.forward(self.params, X, False)
        _, dX = self.net.backward(np.ones_like(out), cache, self.params, param_grads=False)
        if single:
            return out[0], dX[0]
        return out, dX

    def predict_denorm(self, X):
        return self.stats.denormalize(self.forward(X))

    def predict_archs(self, archs):
        return self.predict_denorm(np.stack([encode(self.space, a) for a in archs]))


def loss_and_grads(net, params, X, y, train=False, rng=None, delta=1.0):
    out, cache = net.forward(params, X, train, rng)
    loss, dout = T.huber_loss(out, y, delta)
    grads, _ = net.backward(dout, cache, params)
    return loss, grads


def train(
    spec: PredictorSpec,
    space: SpaceDef,
    samples,
    seed,
    role="main",
    epochs=300,
    lr=0.01,
    momentum=0.9,
    weight_decay=1e-4,
):
    """Full-batch SGD on the Huber loss of standardized targets.

    Returns ``(predictor, stats, loss_history)``. ``role`` picks the target:
    ``main`` -> performance, ``aux`` -> cost.
    """
    samples = list(samples)
    if len(samples) < 2:
        raise ValueError("need at least two training samples")
    X = np.stack([encode(space, s.arch) for s in samples])
    if role == "main":
        y = np.array([s.performance for s in samples], dtype=np.float64)
    elif role == "aux":
        y = np.array([s.cost for s in samples], dtype=np.float64)
    else:
        raise ValueError(f"role must be 'main' or 'aux', got {role!r}")
    stats = NormStats.fit(y)
    target = stats.normalize(y)

    rng = np.random.default_rng(seed)
    net = build_net(spec, space)
    params = net.init(rng)
    opt = T.SGD(T.CosineSchedule(lr, epochs), momentum=momentum, weight_decay=weight_decay)
    history = []
    for _ in range(epochs):
        loss, grads = loss_and_grads(net, params, X, target, train=True, rng=rng)
        T.check_finite(loss, "training loss")
        history.append(loss)
        opt.step(params, grads)
    pred = Predictor(spec, space, params, stats, role)
    return pred, stats, history


# -- checkpoints ------------------------------------------------------------


def save_checkpoint(pred: Predictor, path) -> None:
    """``.npz`` archive: one array per layer plus a JSON ``meta`` entry.

    ``meta`` records the format/version, predictor spec, role, layer order with
    shapes, normalization stats and the space definition and fingerprint.
    """
    names = pred.net.layer_names()
    meta = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "role": pred.role,
        "spec": asdict(pred.spec),
        "layers": [[n, list(pred.params[n].shape)] for n in names],
        "norm": asdict(pred.stats),
        "space": pred.space.to_dict(),
        "space_fingerprint": pred.space.fingerprint(),
    }
    arrays = {f"p{i}": pred.params[n] for i, n in enumerate(names)}
    with open(path, "wb") as fh:
        np.savez(fh, meta=np.array(json.dumps(meta, sort_keys=True)), **arrays)


def load_checkpoint(path, space: SpaceDef | None = None) -> Predictor:
    """Load a checkpoint; refuses one trained against a different space."""
    try:
        data = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    with data:
        meta = json.loads(str(data["meta"]))
        if meta.get("format") != CHECKPOINT_FORMAT or meta.get("version") != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported checkpoint format")
        saved_space = space_from_dict(meta["space"])
        if space is not None and space.fingerprint() != meta["space_fingerprint"]:
            raise CheckpointError(
                f"{path}: trained for space {meta['space_fingerprint']}, got {space.fingerprint()}"
            )
        params = {}
        for i, (name, shape) in enumerate(meta["layers"]):
            arr = np.array(data[f"p{i}"], dtype=np.float64)
            if list(arr.shape) != shape:
                raise CheckpointError(f"{path}: layer {name} has shape {arr.shape}, expected {shape}")
            params[name] = arr
    spec_d = meta["spec"]
    spec_d["input_dim"] = tuple(spec_d["input_dim"])
    return Predictor(
        PredictorSpec(**spec_d), space or saved_space, params, NormStats(**meta["norm"]), meta["role"]
    )
