"""ReLU network policies with output projection, ERM training and serialization.

The network maps states to raw inputs; :meth:`MlpPolicy.forward` projects the
raw output onto the input set ``U``. Training fits the raw output (projection
is applied at inference only) with full-batch or mini-batch Adam.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import InvalidInput, NonFiniteLoss
from .qp import QpSolver
from .sets import Polytope, contains

MAGIC = b"TIMLP1"
SMOOTH = 1e-12


def project_onto(U: Polytope, u: np.ndarray, _cache={}) -> np.ndarray:
    """Euclidean projection of one input (or a batch of rows) onto ``U``."""
    if U.is_box:
        return np.clip(u, U.lower, U.upper)
    u = np.asarray(u, dtype=float)
    if u.ndim == 2:
        return np.array([project_onto(U, row) for row in u])
    if contains(U, u, 0.0):
        return u
    key = (U.G.tobytes(), U.h.tobytes())
    solver = _cache.get(key)
    if solver is None:
        solver = QpSolver(2.0 * np.eye(U.dim), np.zeros((0, U.dim)), U.G)
        _cache[key] = solver
    return solver.solve(-2.0 * u, b_in=U.h).z


@dataclass
class MlpPolicy:
    weights: list          # W[l] has shape (width[l+1], width[l])
    biases: list
    U: Polytope
    seed: int | None = None
    activation: str = "relu"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.weights) != len(self.biases) or not self.weights:
            raise InvalidInput("weights and biases must be nonempty lists of equal length")
        self.weights = [np.asarray(W, dtype=float) for W in self.weights]
        self.biases = [np.asarray(b, dtype=float).reshape(-1) for b in self.biases]
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.shape[0] != b.size:
                raise InvalidInput(f"layer {l}: weight rows {W.shape[0]} != bias size {b.size}")
            if l and W.shape[1] != self.weights[l - 1].shape[0]:
                raise InvalidInput(f"layer {l}: input width does not match the previous layer")
        if self.activation not in ("relu", "identity"):
            raise InvalidInput(f"unknown activation {self.activation!r}")
        if self.U.dim != self.weights[-1].shape[0]:
            raise InvalidInput("output width does not match the input set dimension")

    @classmethod
    def init(cls, d_x: int, d_u: int, U: Polytope, hidden=(50, 50, 50), seed: int = 0,
             activation: str = "relu") -> "MlpPolicy":
        """Uniform fan-in initialization, ``W, b ~ U(-1/sqrt(fan_in), 1/sqrt(fan_in))``."""
        rng = np.random.default_rng(seed)
        widths = [d_x, *hidden, d_u]
        Ws, bs = [], []
        for fan_in, fan_out in zip(widths[:-1], widths[1:]):
            bound = 1.0 / np.sqrt(fan_in)
            Ws.append(rng.uniform(-bound, bound, (fan_out, fan_in)))
            bs.append(rng.uniform(-bound, bound, fan_out))
        return cls(Ws, bs, U, seed=seed, activation=activation)

    @classmethod
    def zeros(cls, d_x: int, d_u: int, U: Polytope, hidden=(50, 50, 50)) -> "MlpPolicy":
        widths = [d_x, *hidden, d_u]
        return cls([np.zeros((o, i)) for i, o in zip(widths[:-1], widths[1:])],
                   [np.zeros(o) for o in widths[1:]], U)

    @property
    def widths(self) -> list[int]:
        return [self.weights[0].shape[1]] + [W.shape[0] for W in self.weights]

    @property
    def d_x(self) -> int:
        return self.widths[0]

    @property
    def d_u(self) -> int:
        return self.widths[-1]

    def copy(self) -> "MlpPolicy":
        return MlpPolicy([W.copy() for W in self.weights], [b.copy() for b in self.biases],
                         self.U, self.seed, self.activation, dict(self.meta))

    # -- parameters as one flat vector -------------------------------------
    def get_params(self) -> np.ndarray:
        return np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(self.weights, self.biases)])

    def set_params(self, theta) -> None:
        theta = np.asarray(theta, dtype=float)
        k = 0
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            self.weights[l] = theta[k:k + W.size].reshape(W.shape).copy()
            k += W.size
            self.biases[l] = theta[k:k + b.size].copy()
            k += b.size
        if k != theta.size:
            raise InvalidInput(f"expected {k} parameters, got {theta.size}")

    # -- evaluation ----------------------------------------------------------
    def _act(self, a):
        return np.maximum(a, 0.0) if self.activation == "relu" else a

    def raw(self, x) -> np.ndarray:
        """Network output before projection; ``x`` may be one state or a batch."""
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        h = np.atleast_2d(x)
        L = len(self.weights)
        for l, (W, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ W.T + b
            if l < L - 1:
                h = self._act(h)
        return h[0] if single else h

    def forward(self, x) -> np.ndarray:
        return project_onto(self.U, self.raw(x))

    def __call__(self, x, t=0):
        return self.forward(x)


def forward(policy: MlpPolicy, x) -> np.ndarray:
    return policy.forward(x)


@dataclass
class Dataset:
    states: np.ndarray     # (n, d_x)
    labels: np.ndarray     # (n, d_u)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        labels = np.asarray(self.labels, dtype=float)
        if labels.size % max(self.states.shape[0], 1) or labels.shape[0] != self.states.shape[0]:
            raise InvalidInput(f"{self.states.shape[0]} states but labels of shape {labels.shape}")
        self.labels = labels.reshape(self.states.shape[0], -1)
        if not (np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.labels))):
            raise InvalidInput("dataset contains non-finite values")

    def __len__(self):
        return self.states.shape[0]

    def check_labels(self, U: Polytope, slack: float = 1e-6) -> None:
        for u in self.labels:
            if not contains(U, u, slack):
                raise InvalidInput(f"expert label {u} lies outside U")

    @classmethod
    def concat(cls, parts) -> "Dataset":
        parts = list(parts)
        return cls(np.vstack([p.states for p in parts]), np.vstack([p.labels for p in parts]))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 500
    batch_size: int | None = None      # None: full batch
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    loss: str = "norm"                 # "norm" (mean of norms) or "squared"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInput("learning rate must be positive")
        if self.epochs < 1:
            raise InvalidInput("epochs must be at least 1")
        if self.batch_size is not None and self.batch_size < 1:
            raise InvalidInput("batch size must be positive")
        if self.loss not in ("norm", "squared"):
            raise InvalidInput(f"unknown loss {self.loss!r}")


def loss_and_grad(policy: MlpPolicy, X, Y, loss: str = "norm", need_grad: bool = True):
    """Mean loss over the batch and its gradient as lists matching the layers."""
    L = len(policy.weights)
    hs = [X]
    pre = []
    h = X
    for l, (W, b) in enumerate(zip(policy.weights, policy.biases)):
        a = h @ W.T + b
        pre.append(a)
        h = policy._act(a) if l < L - 1 else a
        hs.append(h)
    r = h - Y
    n = X.shape[0]
    if loss == "norm":
        norms = np.sqrt(np.sum(r * r, axis=1) + SMOOTH)
        value = float(np.mean(norms))
        delta = r / norms[:, None] / n
    else:
        value = float(np.mean(np.sum(r * r, axis=1)))
        delta = 2.0 * r / n
    if not need_grad:
        return value, None, None
    gW, gb = [None] * L, [None] * L
    for l in range(L - 1, -1, -1):
        gW[l] = delta.T @ hs[l]
        gb[l] = delta.sum(axis=0)
        if l:
            delta = delta @ policy.weights[l]
            if policy.activation == "relu":
                delta = delta * (pre[l - 1] > 0)
    return value, gW, gb


def train_erm(dataset: Dataset, cfg: TrainConfig, init: MlpPolicy) -> MlpPolicy:
    """Adam on the mean (un-squared) norm of raw-output errors; exactly ``cfg.epochs`` passes."""
    if len(dataset) == 0:
        raise InvalidInput("empty dataset")
    if dataset.states.shape[1] != init.d_x or dataset.labels.shape[1] != init.d_u:
        raise InvalidInput("dataset dimensions do not match the policy")
    pol = init.copy()
    rng = np.random.default_rng(cfg.seed)
    X, Y = dataset.states, dataset.labels
    n = len(dataset)
    bs = n if cfg.batch_size is None else min(cfg.batch_size, n)
    mW = [np.zeros_like(W) for W in pol.weights]
    vW = [np.zeros_like(W) for W in pol.weights]
    mb = [np.zeros_like(b) for b in pol.biases]
    vb = [np.zeros_like(b) for b in pol.biases]
    b1, b2, lr, eps = cfg.beta1, cfg.beta2, cfg.learning_rate, cfg.adam_eps
    history = []
    step = 0
    for epoch in range(cfg.epochs):
        order = np.arange(n) if bs == n else rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, bs):
            idx = order[start:start + bs]
            val, gW, gb = loss_and_grad(pol, X[idx], Y[idx], cfg.loss)
            grads_finite = all(np.all(np.isfinite(g)) for g in gW + gb)
            if not np.isfinite(val) or not grads_finite:
                raise NonFiniteLoss(f"non-finite loss or gradient at epoch {epoch}, step {step} "
                                    f"(loss={val}, batch of {idx.size})")
            epoch_loss += val * idx.size
            step += 1
            c1 = 1.0 - b1 ** step
            c2 = 1.0 - b2 ** step
            for l in range(len(pol.weights)):
                mW[l] = b1 * mW[l] + (1 - b1) * gW[l]
                vW[l] = b2 * vW[l] + (1 - b2) * gW[l] ** 2
                pol.weights[l] = pol.weights[l] - lr * (mW[l] / c1) / (np.sqrt(vW[l] / c2) + eps)
                mb[l] = b1 * mb[l] + (1 - b1) * gb[l]
                vb[l] = b2 * vb[l] + (1 - b2) * gb[l] ** 2
                pol.biases[l] = pol.biases[l] - lr * (mb[l] / c1) / (np.sqrt(vb[l] / c2) + eps)
        history.append(epoch_loss / n)
    final, _, _ = loss_and_grad(pol, X, Y, cfg.loss, need_grad=False)
    pol.meta = dict(pol.meta, final_loss=final, loss_history=history, train_config=asdict(cfg),
                    train_size=n)
    return pol


def _pattern(policy: MlpPolicy, X):
    h, pats = X, []
    for W, b in zip(policy.weights[:-1], policy.biases[:-1]):
        a = h @ W.T + b
        pats.append(a > 0)
        h = policy._act(a)
    return pats


def grad_check(policy: MlpPolicy, dataset: Dataset, n_coords: int = 20, h: float = 1e-5,
               seed: int = 0, loss: str = "norm") -> float:
    """Largest relative error of the analytic gradient against central differences.

    Points near a ReLU kink or with a near-zero residual are dropped first,
    and coordinates whose perturbation flips an activation are redrawn.
    """
    X, Y = dataset.states, dataset.labels
    keep = np.ones(len(dataset), dtype=bool)
    hh = X
    for l, (W, b) in enumerate(zip(policy.weights, policy.biases)):
        a = hh @ W.T + b
        if l < len(policy.weights) - 1:
            if policy.activation == "relu":
                keep &= np.all(np.abs(a) >= 1e-6, axis=1)
            hh = policy._act(a)
        else:
            keep &= np.linalg.norm(a - Y, axis=1) >= 1e-6
    if not keep.any():
        raise InvalidInput("no smooth points in the dataset")
    X, Y = X[keep], Y[keep]
    _, gW, gb = loss_and_grad(policy, X, Y, loss)
    grad = np.concatenate([np.concatenate([W.ravel(), b]) for W, b in zip(gW, gb)])
    theta = policy.get_params()
    probe = policy.copy()
    base = _pattern(policy, X)
    rng = np.random.default_rng(seed)
    worst, checked, tries = 0.0, 0, 0
    while checked < n_coords and tries < 50 * n_coords:
        tries += 1
        i = int(rng.integers(theta.size))
        vals = []
        flipped = False
        for s in (1.0, -1.0):
            th = theta.copy()
            th[i] += s * h
            probe.set_params(th)
            if any(np.any(p != q) for p, q in zip(_pattern(probe, X), base)):
                flipped = True
                break
            vals.append(loss_and_grad(probe, X, Y, loss, need_grad=False)[0])
        if flipped:
            continue
        fd = (vals[0] - vals[1]) / (2 * h)
        err = abs(fd - grad[i]) / max(abs(fd), abs(grad[i]), 1e-7)
        worst = max(worst, err)
        checked += 1
    return worst


# -- serialization ------------------------------------------------------------

def save_policy(policy: MlpPolicy, path) -> None:
    """Binary weights file plus a ``.json`` sidecar with the metadata."""
    path = Path(path)
    widths = policy.widths
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(policy.weights)))
        fh.write(struct.pack(f"<{len(widths)}I", *widths))
        for W, b in zip(policy.weights, policy.biases):
            fh.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    meta = {k: v for k, v in policy.meta.items() if k != "loss_history"}
    side = {
        "seed": policy.seed,
        "activation": policy.activation,
        "U_G": policy.U.G.tolist(),
        "U_h": policy.U.h.tolist(),
        "U_box": policy.U.is_box,
        "meta": meta,
    }
    with open(_sidecar(path), "w") as fh:
        json.dump(side, fh, indent=1, sort_keys=True)


def load_policy(path) -> MlpPolicy:
    path = Path(path)
    data = path.read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise InvalidInput(f"{path} is not a policy file")
    k = len(MAGIC)
    (L,) = struct.unpack_from("<I", data, k)
    k += 4
    widths = struct.unpack_from(f"<{L + 1}I", data, k)
    k += 4 * (L + 1)
    Ws, bs = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        W = np.frombuffer(data, dtype="<f8", count=fan_in * fan_out, offset=k).reshape(fan_out, fan_in)
        k += 8 * W.size
        b = np.frombuffer(data, dtype="<f8", count=fan_out, offset=k)
        k += 8 * b.size
        Ws.append(W.astype(float))
        bs.append(b.astype(float))
    if k != len(data):
        raise InvalidInput(f"{path} has {len(data) - k} trailing bytes")
    with open(_sidecar(path)) as fh:
        side = json.load(fh)
    if side["U_box"]:
        d = len(side["U_h"]) // 2
        h = np.asarray(side["U_h"])
        U = Polytope.box(-h[d:], h[:d])
    else:
        U = Polytope(side["U_G"], side["U_h"])
    return MlpPolicy(Ws, bs, U, seed=side["seed"], activation=side["activation"], meta=side["meta"])


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")
