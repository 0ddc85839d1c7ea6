"""Dense Q-network with hand-written backprop, Adam, and Padé activation units.

Parameter order (used for flattening, checkpoints and consolidation
snapshots): ``W1, b1, W2, b2, ..., WL, bL`` followed by ``a, b`` for every
hidden layer whose activation is a PAU, in layer order. ``Wl`` has shape
``(fan_in, fan_out)`` and is flattened row-major.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from cderail.errors import DimMismatchError, IncongruentError, ShapeMismatchError, StaleCacheError

RELU = "relu"
PAU = "pau"

# Rational (5, 4) least-squares fit of max(0, x) on [-3, 3] with the
# pole-free denominator 1 + |sum b_k x^k|.
RELU_FIT_NUMERATOR = np.array([0.02996348, 0.61690165, 2.37539147, 3.06608078, 1.52474449, 0.25281987])
RELU_FIT_DENOMINATOR = np.array([1.19160814, 4.40811795, 0.91111034, 0.34885983])

CHECKPOINT_FORMAT = "cderail.qnetwork"
CHECKPOINT_VERSION = 1


@dataclass
class ActivationSpec:
    kind: str = RELU
    a: np.ndarray | None = None
    b: np.ndarray | None = None
    trainable: bool = True

    @classmethod
    def relu(cls) -> ActivationSpec:
        return cls(RELU)

    @classmethod
    def pau(cls, trainable: bool = True, dtype=np.float64) -> ActivationSpec:
        return cls(PAU, RELU_FIT_NUMERATOR.astype(dtype), RELU_FIT_DENOMINATOR.astype(dtype), trainable)

    def __post_init__(self):
        if self.kind not in (RELU, PAU):
            raise ValueError(f"unknown activation {self.kind!r}")
        if self.kind == PAU:
            if self.a is None or self.b is None or len(self.a) != 6 or len(self.b) != 4:
                raise ValueError("PAU needs 6 numerator and 4 denominator coefficients")

    def copy(self) -> ActivationSpec:
        if self.kind == RELU:
            return ActivationSpec(RELU)
        return ActivationSpec(PAU, self.a.copy(), self.b.copy(), self.trainable)


def _powers(x, n):
    out = [np.ones_like(x), x]
    for _ in range(n - 1):
        out.append(out[-1] * x)
    return out


def pau_forward(a, b, x):
    """Safe Padé unit ``sum_j a_j x^j / (1 + |sum_k b_k x^k|)``, elementwise."""
    x = np.asarray(x)
    xp = _powers(x, 5)
    num = sum(a[j] * xp[j] for j in range(6))
    den = sum(b[k - 1] * xp[k] for k in range(1, 5))
    return num / (1.0 + np.abs(den))


def pau_backward(a, b, x, dy):
    """Gradients of :func:`pau_forward` for upstream ``dy``.

    ``dx`` has the shape of ``x``; ``da`` and ``db`` are summed over all
    elements. ``sign(0)`` is taken as 0.
    """
    x = np.asarray(x)
    dy = np.asarray(dy)
    xp = _powers(x, 5)
    num = sum(a[j] * xp[j] for j in range(6))
    den = sum(b[k - 1] * xp[k] for k in range(1, 5))
    s = np.sign(den)
    D = 1.0 + np.abs(den)
    dnum = sum(j * a[j] * xp[j - 1] for j in range(1, 6))
    dden = sum(k * b[k - 1] * xp[k - 1] for k in range(1, 5))
    dx = dy * (dnum / D - num * s * dden / D**2)
    g_a = dy / D
    g_b = -dy * num * s / D**2
    da = np.array([np.sum(g_a * xp[j]) for j in range(6)])
    db = np.array([np.sum(g_b * xp[k]) for k in range(1, 5)])
    return dx, da, db


class QNetwork:
    """Multi-layer perceptron mapping an observation to one value per action."""

    def __init__(self, weights, biases, activations):
        if not (len(weights) == len(biases) == len(activations) + 1):
            raise ValueError("need one activation per hidden layer")
        self.weights = list(weights)
        self.biases = list(biases)
        self.activations = list(activations)
        self.version = 0

    @property
    def sizes(self) -> list[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        for act in self.activations:
            if act.kind == PAU:
                out += [act.a, act.b]
        return out

    def trainable(self) -> list[bool]:
        flags = [True] * (2 * len(self.weights))
        for act in self.activations:
            if act.kind == PAU:
                flags += [act.trainable, act.trainable]
        return flags

    def n_layer_params(self) -> int:
        """Number of leading entries of :meth:`params` that are weights or biases."""
        return 2 * len(self.weights)

    def get_flat(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat) -> None:
        flat = np.asarray(flat)
        params = self.params()
        total = sum(p.size for p in params)
        if flat.size != total:
            raise ShapeMismatchError(f"expected {total} values, got {flat.size}")
        i = 0
        for p in params:
            p[...] = flat[i : i + p.size].reshape(p.shape)
            i += p.size
        self.version += 1

    def copy(self) -> QNetwork:
        return QNetwork(
            [w.copy() for w in self.weights],
            [b.copy() for b in self.biases],
            [a.copy() for a in self.activations],
        )

    def set_pau_trainable(self, trainable: bool) -> None:
        for act in self.activations:
            if act.kind == PAU:
                act.trainable = trainable

    def architecture(self) -> dict:
        return {
            "sizes": self.sizes,
            "activations": [{"kind": a.kind, "trainable": a.trainable} for a in self.activations],
            "dtype": np.dtype(self.dtype).name,
        }


def mlp_init(d_in, hidden=(1024, 1024), d_out=5, activation=RELU, seed=0, dtype=np.float64) -> QNetwork:
    """Uniform fan-in initialisation; PAU layers start at the ReLU fit."""
    sizes = [d_in, *hidden, d_out]
    if any(s < 1 for s in sizes):
        raise ValueError(f"layer sizes must be positive: {sizes}")
    rng = np.random.default_rng(seed)
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes, sizes[1:]):
        bound = np.sqrt(1.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype))
        biases.append(rng.uniform(-bound, bound, size=fan_out).astype(dtype))
    acts = []
    for _ in hidden:
        if isinstance(activation, ActivationSpec):
            act = activation.copy()
            if act.kind == PAU:
                act.a, act.b = act.a.astype(dtype), act.b.astype(dtype)
        elif activation == PAU:
            act = ActivationSpec.pau(dtype=dtype)
        else:
            act = ActivationSpec.relu()
        acts.append(act)
    return QNetwork(weights, biases, acts)


@dataclass
class ForwardCache:
    version: int
    inputs: list  # input to each affine layer
    pre: list  # pre-activation of each hidden layer
    single: bool


def forward(net: QNetwork, x):
    """Q-values for one observation (1-D) or a batch (2-D)."""
    x = np.asarray(x, dtype=net.dtype)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[1] != net.sizes[0]:
        raise DimMismatchError(f"input has {x.shape[1]} features, network expects {net.sizes[0]}")
    inputs, pre = [x], []
    h = x
    for layer, (w, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ w + b
        if layer == len(net.weights) - 1:
            h = z
            break
        pre.append(z)
        act = net.activations[layer]
        h = np.maximum(z, 0) if act.kind == RELU else pau_forward(act.a, act.b, z)
        inputs.append(h)
    cache = ForwardCache(net.version, inputs, pre, single)
    return (h[0] if single else h), cache


def backward(net: QNetwork, cache: ForwardCache, dq, per_sample_squares: bool = False) -> list[np.ndarray]:
    """Gradients of a scalar loss w.r.t. ``net.params()`` given ``dL/dq``.

    With ``per_sample_squares`` the result is instead, per parameter, the sum
    over batch rows of the squared single-row gradient (used for Fisher
    estimates). Frozen PAU coefficients always get zero gradients.
    """
    if cache.version != net.version:
        raise StaleCacheError("network changed since the forward pass")
    dq = np.asarray(dq, dtype=net.dtype)
    if cache.single:
        dq = dq[None, :]
    n_layers = len(net.weights)
    w_grads, b_grads = [None] * n_layers, [None] * n_layers
    act_grads = {}
    up = dq
    for layer in range(n_layers - 1, -1, -1):
        inp = cache.inputs[layer]
        if per_sample_squares:
            w_grads[layer] = (inp * inp).T @ (up * up)
            b_grads[layer] = np.sum(up * up, axis=0)
        else:
            w_grads[layer] = inp.T @ up
            b_grads[layer] = up.sum(axis=0)
        if layer == 0:
            break
        dh = up @ net.weights[layer].T
        z = cache.pre[layer - 1]
        act = net.activations[layer - 1]
        if act.kind == RELU:
            up = dh * (z > 0)
        else:
            dz, da, db = _pau_grads(act, z, dh, per_sample_squares)
            up = dz
            act_grads[layer - 1] = (da, db)
    grads = []
    for w, b in zip(w_grads, b_grads):
        grads += [w, b]
    for i, act in enumerate(net.activations):
        if act.kind == PAU:
            if act.trainable:
                grads += list(act_grads[i])
            else:
                grads += [np.zeros_like(act.a), np.zeros_like(act.b)]
    return grads


def _pau_grads(act, z, dh, per_sample_squares):
    if not per_sample_squares:
        return pau_backward(act.a, act.b, z, dh)
    # per-row coefficient gradients, squared and summed over rows
    a, b = act.a, act.b
    zp = _powers(z, 5)
    num = sum(a[j] * zp[j] for j in range(6))
    den = sum(b[k - 1] * zp[k] for k in range(1, 5))
    s = np.sign(den)
    D = 1.0 + np.abs(den)
    dnum = sum(j * a[j] * zp[j - 1] for j in range(1, 6))
    dden = sum(k * b[k - 1] * zp[k - 1] for k in range(1, 5))
    dz = dh * (dnum / D - num * s * dden / D**2)
    g_a = dh / D
    g_b = -dh * num * s / D**2
    da = np.array([np.sum(np.sum(g_a * zp[j], axis=1) ** 2) for j in range(6)])
    db = np.array([np.sum(np.sum(g_b * zp[k], axis=1) ** 2) for k in range(1, 5)])
    return dz, da.astype(z.dtype), db.astype(z.dtype)


@dataclass
class OptState:
    """Adam moments and hyperparameters."""

    lr: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    step: int = 0

    @classmethod
    def for_network(cls, net: QNetwork, **hyper) -> OptState:
        params = net.params()
        return cls(m=[np.zeros_like(p) for p in params], v=[np.zeros_like(p) for p in params], **hyper)

    def copy(self) -> OptState:
        return OptState(self.lr, self.beta1, self.beta2, self.eps,
                        [m.copy() for m in self.m], [v.copy() for v in self.v], self.step)


def adam_step(net: QNetwork, grads, opt: OptState) -> None:
    """One bias-corrected Adam update, in place. Frozen parameters are skipped."""
    params = net.params()
    if len(grads) != len(params) or len(opt.m) != len(params):
        raise ShapeMismatchError("gradient/optimizer state does not match the network")
    for p, g in zip(params, grads):
        if p.shape != np.shape(g):
            raise ShapeMismatchError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for p, g, m, v, train in zip(params, grads, opt.m, opt.v, net.trainable()):
        if not train:
            continue
        tmp = np.multiply(g, 1.0 - opt.beta1, dtype=m.dtype)
        m *= opt.beta1
        m += tmp
        np.square(g, out=tmp)
        tmp *= 1.0 - opt.beta2
        v *= opt.beta2
        v += tmp
        # p -= lr * (m / c1) / (sqrt(v / c2) + eps), without full-size temporaries
        np.sqrt(v, out=tmp)
        tmp *= 1.0 / np.sqrt(c2)
        tmp += opt.eps
        np.divide(m, tmp, out=tmp)
        tmp *= opt.lr / c1
        p -= tmp.astype(p.dtype, copy=False)
    net.version += 1


def soft_update(target: QNetwork, source: QNetwork, tau: float) -> None:
    for pt, ps in zip(target.params(), source.params()):
        pt *= 1.0 - tau
        pt += tau * ps
    target.version += 1


def _check_congruent(nets):
    ref = nets[0]
    for n in nets[1:]:
        if n.sizes != ref.sizes or [a.kind for a in n.activations] != [a.kind for a in ref.activations]:
            raise IncongruentError(f"architectures differ: {ref.sizes} vs {n.sizes}")


def average_weights(nets, coeffs) -> QNetwork:
    """``(1/j) * sum_i coeffs[i] * theta_i`` over weights and biases.

    PAU coefficients of the result restart at the ReLU fit and are trainable.
    """
    if not nets or len(nets) != len(coeffs):
        raise IncongruentError("need one coefficient per network")
    _check_congruent(nets)
    j = len(nets)
    out = nets[0].copy()
    for layer in range(len(out.weights)):
        out.weights[layer] = sum(c * n.weights[layer] for n, c in zip(nets, coeffs)) / j
        out.biases[layer] = sum(c * n.biases[layer] for n, c in zip(nets, coeffs)) / j
        out.weights[layer] = out.weights[layer].astype(nets[0].dtype)
        out.biases[layer] = out.biases[layer].astype(nets[0].dtype)
    out.activations = [
        ActivationSpec.pau(dtype=out.dtype) if a.kind == PAU else ActivationSpec.relu() for a in out.activations
    ]
    return out


def network_arrays(net: QNetwork, prefix: str = "") -> dict[str, np.ndarray]:
    arrays = {f"{prefix}param{i}": p for i, p in enumerate(net.params())}
    arrays[f"{prefix}architecture"] = np.array(json.dumps(net.architecture()))
    return arrays


def network_from_arrays(arrays, prefix: str = "") -> QNetwork:
    arch = json.loads(str(arrays[f"{prefix}architecture"]))
    sizes = arch["sizes"]
    dtype = np.dtype(arch["dtype"])
    n_layers = len(sizes) - 1
    weights = [np.array(arrays[f"{prefix}param{2 * i}"], dtype=dtype) for i in range(n_layers)]
    biases = [np.array(arrays[f"{prefix}param{2 * i + 1}"], dtype=dtype) for i in range(n_layers)]
    acts, k = [], 2 * n_layers
    for spec in arch["activations"]:
        if spec["kind"] == PAU:
            a = np.array(arrays[f"{prefix}param{k}"], dtype=dtype)
            b = np.array(arrays[f"{prefix}param{k + 1}"], dtype=dtype)
            acts.append(ActivationSpec(PAU, a, b, spec["trainable"]))
            k += 2
        else:
            acts.append(ActivationSpec.relu())
    return QNetwork(weights, biases, acts)


def save_network(net: QNetwork, path) -> None:
    header = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION}
    np.savez(path, header=np.array(json.dumps(header)), **network_arrays(net))


def load_network(path) -> QNetwork:
    with np.load(path) as data:
        header = json.loads(str(data["header"]))
        if header.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path} is not a Q-network checkpoint")
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        return network_from_arrays(data)
