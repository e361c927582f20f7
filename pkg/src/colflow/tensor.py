"""Dense matrix bridge, residual regression network, and data-parallel
training over the communicator.

The network: dense input layer with ReLU, a stack of residual blocks
(dense -> dense -> dropout, skip added before a final ReLU), optional
trailing dense+ReLU layers, and a single linear output unit. Gradients are
hand-derived for this fixed architecture; a finite-difference check in the
test suite keeps them honest.

Parameters flatten in one fixed order on every rank (input W, input b,
then per block D1.W, D1.b, D2.W, D2.b, then tail layers, then head), so
broadcast/allreduce of the flat vector keeps replicas bitwise identical.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

from .columnar import NUMERIC_TYPES, Table
from .comm import ReduceOp
from .distops import DistContext
from .errors import (
    LengthMismatch,
    NonFiniteLoss,
    NullInNumericBridge,
    ShapeMismatch,
    WrongType,
)

_U64 = 0xFFFFFFFFFFFFFFFF


class SplitMix64:
    """Tiny deterministic RNG; identical stream on every platform."""

    def __init__(self, seed: int):
        self.state = seed & _U64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & _U64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _U64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _U64
        return (z ^ (z >> 31)) & _U64

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        u = (self.next_u64() >> 11) * (2.0 ** -53)
        return lo + (hi - lo) * u

    def normal(self) -> float:
        # Box-Muller, one value per call (spare discarded for simplicity)
        u1 = max(self.uniform(), 2.0 ** -53)
        u2 = self.uniform()
        return math.sqrt(-2.0 * math.log(u1)) * math.cos(2.0 * math.pi * u2)

    def randint(self, n: int) -> int:
        return self.next_u64() % n

    def shuffle(self, xs: list) -> None:
        for i in range(len(xs) - 1, 0, -1):
            j = self.next_u64() % (i + 1)
            xs[i], xs[j] = xs[j], xs[i]


# -- table <-> matrix bridge ----------------------------------------------

def table_to_matrix(t: Table, cols: list[str]) -> np.ndarray:
    """Row-major Float64 matrix from numeric, null-free columns."""
    out = np.empty((t.nrows, len(cols)), dtype=np.float64)
    for j, name in enumerate(cols):
        ci = t.schema.index_of(name)
        if t.schema.dtypes[ci] not in NUMERIC_TYPES:
            raise WrongType(f"column {name!r} is {t.schema.dtypes[ci].name}")
        vals = t.columns[ci].values
        for i, v in enumerate(vals):
            if v is None:
                raise NullInNumericBridge(f"null in column {name!r} row {i}")
            out[i, j] = v
    return out


def split_train_test(
    x: np.ndarray, y: np.ndarray, n_train: int
) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Deterministic prefix split: first n_train rows train, rest test."""
    return x[:n_train], y[:n_train], x[n_train:], y[n_train:]


# -- network ---------------------------------------------------------------

@dataclass
class NetConfig:
    in_dim: int = 1537
    hidden_dim: int = 64
    n_blocks: int = 2
    n_tail: int = 1
    dropout_p: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.in_dim < 1 or self.hidden_dim < 1:
            raise ValueError("in_dim and hidden_dim must be >= 1")
        if self.n_blocks < 0 or self.n_tail < 0:
            raise ValueError("n_blocks and n_tail must be >= 0")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ValueError("dropout_p must be in [0, 1)")


@dataclass
class TrainConfig:
    lr: float = 0.01
    epochs: int = 10
    batch_size: int | None = None  # None = full batch
    base_seed: int = 0

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("lr must be positive")


class ResponseNet:
    """Residual-block regression network; parameters live as a list of
    (W, b) pairs in fixed flattening order."""

    def __init__(self, cfg: NetConfig):
        self.cfg = cfg
        rng = SplitMix64(cfg.seed)
        h = cfg.hidden_dim
        self.params: list[np.ndarray] = []
        self._add_dense(rng, cfg.in_dim, h)
        for _ in range(cfg.n_blocks):
            self._add_dense(rng, h, h)  # D1
            self._add_dense(rng, h, h)  # D2
        for _ in range(cfg.n_tail):
            self._add_dense(rng, h, h)
        self._add_dense(rng, h, 1)  # head

    def _add_dense(self, rng: SplitMix64, fan_in: int, fan_out: int):
        bound = math.sqrt(6.0 / fan_in)
        w = np.array(
            [rng.uniform(-bound, bound) for _ in range(fan_in * fan_out)],
            dtype=np.float64,
        ).reshape(fan_in, fan_out)
        b = np.zeros(fan_out, dtype=np.float64)
        self.params.append(w)
        self.params.append(b)

    # layer index helpers: params[2i], params[2i+1] are layer i's W, b
    @property
    def n_layers(self) -> int:
        return len(self.params) // 2

    def layer(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        return self.params[2 * i], self.params[2 * i + 1]

    def flatten(self) -> np.ndarray:
        return np.concatenate([p.ravel() for p in self.params])

    def unflatten(self, flat: np.ndarray) -> None:
        pos = 0
        for i, p in enumerate(self.params):
            n = p.size
            self.params[i] = flat[pos : pos + n].reshape(p.shape).copy()
            pos += n
        if pos != flat.size:
            raise ShapeMismatch(
                f"flat vector has {flat.size} entries, expected {pos}"
            )

    def n_params(self) -> int:
        return sum(p.size for p in self.params)


def forward(net: ResponseNet, x: np.ndarray, train: bool = False,
            rng: SplitMix64 | None = None):
    """Returns (yhat: n x 1, cache for backward). Train mode applies
    inverted dropout inside each block using `rng`."""
    cfg = net.cfg
    if x.ndim != 2 or x.shape[1] != cfg.in_dim:
        raise ShapeMismatch(f"input shape {x.shape}, expected (n, {cfg.in_dim})")
    p = cfg.dropout_p
    cache: dict = {"x": x, "blocks": [], "tail": []}
    li = 0

    w, b = net.layer(li)
    z0 = x @ w + b
    h = np.maximum(z0, 0.0)
    cache["z0"] = z0
    cache["h0"] = h
    li += 1

    for _ in range(cfg.n_blocks):
        w1, b1 = net.layer(li)
        w2, b2 = net.layer(li + 1)
        li += 2
        h_in = h
        t1 = h_in @ w1 + b1
        t2 = t1 @ w2 + b2
        if train and p > 0.0:
            assert rng is not None, "train-mode dropout needs an rng"
            mask_rng = np.random.Generator(np.random.PCG64(rng.next_u64()))
            mask = (mask_rng.random(t2.shape) >= p).astype(np.float64) / (1.0 - p)
            d = t2 * mask
        else:
            mask = None
            d = t2
        s = h_in + d
        h = np.maximum(s, 0.0)
        cache["blocks"].append({"h_in": h_in, "t1": t1, "mask": mask, "s": s})

    for _ in range(cfg.n_tail):
        w, b = net.layer(li)
        li += 1
        h_in = h
        z = h_in @ w + b
        h = np.maximum(z, 0.0)
        cache["tail"].append({"h_in": h_in, "z": z})

    wh, bh = net.layer(li)
    yhat = h @ wh + bh
    cache["head_in"] = h
    return yhat, cache


def mse_loss(yhat: np.ndarray, y: np.ndarray) -> float:
    if yhat.shape != y.shape:
        raise ShapeMismatch(f"{yhat.shape} vs {y.shape}")
    diff = yhat - y
    return float(np.mean(diff * diff))


def backward(net: ResponseNet, cache: dict, y: np.ndarray) -> np.ndarray:
    """Analytic gradient of mse_loss(forward(...)) w.r.t. every parameter,
    flattened in the fixed parameter order. Reuses the dropout masks from
    the forward cache."""
    cfg = net.cfg
    p = cfg.dropout_p
    h = cache["head_in"]
    n = h.shape[0]
    li = net.n_layers - 1

    yhat = h @ net.layer(li)[0] + net.layer(li)[1]
    dy = 2.0 * (yhat - y) / n

    grads: list[np.ndarray | None] = [None] * len(net.params)
    wh, _ = net.layer(li)
    grads[2 * li] = h.T @ dy
    grads[2 * li + 1] = dy.sum(axis=0)
    dh = dy @ wh.T
    li -= 1

    for t in range(cfg.n_tail - 1, -1, -1):
        tc = cache["tail"][t]
        dz = dh * (tc["z"] > 0.0)
        w, _ = net.layer(li)
        grads[2 * li] = tc["h_in"].T @ dz
        grads[2 * li + 1] = dz.sum(axis=0)
        dh = dz @ w.T
        li -= 1

    for bidx in range(cfg.n_blocks - 1, -1, -1):
        bc = cache["blocks"][bidx]
        w1, _ = net.layer(li - 1)
        w2, _ = net.layer(li)
        ds = dh * (bc["s"] > 0.0)
        dd = ds
        if bc["mask"] is not None:
            dt2 = dd * bc["mask"]
        else:
            dt2 = dd
        grads[2 * li] = bc["t1"].T @ dt2
        grads[2 * li + 1] = dt2.sum(axis=0)
        dt1 = dt2 @ w2.T
        grads[2 * (li - 1)] = bc["h_in"].T @ dt1
        grads[2 * (li - 1) + 1] = dt1.sum(axis=0)
        dh = ds + dt1 @ w1.T
        li -= 2

    dz0 = dh * (cache["z0"] > 0.0)
    grads[0] = cache["x"].T @ dz0
    grads[1] = dz0.sum(axis=0)
    return np.concatenate([g.ravel() for g in grads])


# -- checkpoints -----------------------------------------------------------

def save_params(net: ResponseNet) -> bytes:
    """Length-prefixed little-endian Float64 dump of the flat parameter
    vector."""
    flat = net.flatten()
    return struct.pack("<Q", flat.size) + flat.astype("<f8").tobytes()


def load_params(net: ResponseNet, blob: bytes) -> None:
    (n,) = struct.unpack_from("<Q", blob, 0)
    flat = np.frombuffer(blob, dtype="<f8", count=n, offset=8)
    net.unflatten(flat)


# -- DDP -------------------------------------------------------------------

def ddp_broadcast_params(ctx: DistContext, net: ResponseNet) -> ResponseNet:
    """Overwrite every replica with rank 0's parameters (bitwise)."""
    blob = save_params(net) if ctx.rank == 0 else None
    got = ctx.comm.broadcast_bytes(0, blob)
    load_params(net, got)
    return net


def ddp_allreduce_grads(ctx: DistContext, grads: np.ndarray,
                        local_n: int) -> np.ndarray:
    """Sample-count-weighted gradient average: (sum_r n_r g_r) / (sum_r n_r),
    via two SUM allreduces; with equal shards this is the plain mean.
    Fixed reduction order makes the result bitwise identical everywhere."""
    weighted = (grads * float(local_n)).tolist()
    summed = ctx.comm.allreduce(weighted, ReduceOp.SUM)
    counts = ctx.comm.allreduce([float(local_n)], ReduceOp.SUM)
    total = counts[0]
    if total <= 0:
        raise LengthMismatch("no samples anywhere in the world")
    return np.array(summed, dtype=np.float64) / total


@dataclass
class TrainResult:
    net: ResponseNet
    loss_history: list[float] = field(default_factory=list)


def train(ctx: DistContext, net: ResponseNet, x: np.ndarray, y: np.ndarray,
          cfg: TrainConfig) -> TrainResult:
    """Data-parallel SGD on the rank-local shard (x, y). Every step:
    forward, loss, backward, weighted gradient allreduce, identical SGD
    update on all ranks. Loss history holds the global (sample-weighted)
    shard loss per epoch."""
    n_local = x.shape[0]
    dropout_rng = SplitMix64(cfg.base_seed + ctx.rank)
    history = []
    for epoch in range(cfg.epochs):
        if cfg.batch_size is None:
            batches = [np.arange(n_local)]
        else:
            order = list(range(n_local))
            SplitMix64(cfg.base_seed + epoch).shuffle(order)
            batches = [
                np.array(order[i : i + cfg.batch_size], dtype=np.intp)
                for i in range(0, n_local, cfg.batch_size)
            ]
        # collective batch count: ranks with smaller shards contribute
        # zero-weight steps so every rank makes the same number of calls
        n_steps = int(ctx.comm.allreduce([len(batches)], ReduceOp.MAX)[0])
        loss_num = 0.0
        loss_den = 0.0
        for step in range(n_steps):
            if step < len(batches) and len(batches[step]) > 0:
                bx = x[batches[step]]
                by = y[batches[step]]
                yhat, cache = forward(
                    net, bx, train=net.cfg.dropout_p > 0.0, rng=dropout_rng
                )
                loss = mse_loss(yhat, by)
                if not math.isfinite(loss):
                    raise NonFiniteLoss(f"epoch {epoch} loss {loss}")
                g = backward(net, cache, by)
                bn = bx.shape[0]
                loss_num += loss * bn
                loss_den += bn
            else:
                g = np.zeros(net.n_params(), dtype=np.float64)
                bn = 0
            ghat = ddp_allreduce_grads(ctx, g, bn)
            flat = net.flatten() - cfg.lr * ghat
            net.unflatten(flat)
        global_loss = ctx.comm.allreduce([loss_num, loss_den], ReduceOp.SUM)
        history.append(global_loss[0] / global_loss[1])
    return TrainResult(net=net, loss_history=history)
