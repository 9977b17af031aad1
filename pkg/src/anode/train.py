"""Small ODE-networks trained with plain SGD and a selectable gradient pipeline."""

from __future__ import annotations

import csv
import io
import json
import math
import os
from dataclasses import asdict, dataclass, field as dc_field

import numpy as np

from .adjoint_grad import (PIPELINES, OdeBlock, ReconstructionError, forward_pass,
                           multi_block_backprop)
from .core_math import Rng
from .dynamics import Dense, VectorField
from .solvers import BlowUpError

# ---------------------------------------------------------------------------
# data


@dataclass
class Dataset:
    x: np.ndarray
    y: np.ndarray
    n_classes: int
    train_idx: np.ndarray
    test_idx: np.ndarray

    @property
    def x_train(self):
        return self.x[self.train_idx]

    @property
    def y_train(self):
        return self.y[self.train_idx]

    @property
    def x_test(self):
        return self.x[self.test_idx]

    @property
    def y_test(self):
        return self.y[self.test_idx]

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow([f"x{j}" for j in range(self.x.shape[1])] + ["label"])
        for xi, yi in zip(self.x, self.y):
            w.writerow([repr(float(v)) for v in xi] + [int(yi)])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text


def _split(n: int, seed: int, frac: float = 0.8):
    perm = Rng(seed ^ 0x5EED).permutation(n)
    k = int(round(frac * n))
    return np.sort(perm[:k]), np.sort(perm[k:])


def _blobs(n, noise, rng):
    y = np.arange(n) % 2
    x = np.zeros((n, 2))
    x[:, 0] = np.where(y == 0, -1.0, 1.0)
    if noise > 0:
        x = x + noise * rng.normal(2 * n).reshape(n, 2)
    return x, y


def _spirals(n, noise, rng, turns=1.5):
    y = np.arange(n) % 2
    t = np.sqrt(0.05 + 0.95 * rng.uniform(n))
    ang = 2 * math.pi * turns * t + math.pi * y
    x = np.stack([t * np.cos(ang), t * np.sin(ang)], axis=1)
    if noise > 0:
        x = x + noise * rng.normal(2 * n).reshape(n, 2)
    return x, y


def _moons(n, noise, rng):
    y = np.arange(n) % 2
    t = math.pi * rng.uniform(n)
    x = np.where(y[:, None] == 0,
                 np.stack([np.cos(t), np.sin(t)], 1),
                 np.stack([1 - np.cos(t), 0.5 - np.sin(t)], 1))
    if noise > 0:
        x = x + noise * rng.normal(2 * n).reshape(n, 2)
    return x, y


SYNTHETIC = {"blobs": _blobs, "spirals": _spirals, "moons": _moons}


def _read_csv(path, label_col="label"):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if label_col not in header:
        raise ValueError(f"{path}: line 1: no {label_col!r} column")
    li = header.index(label_col)
    xs, ys = [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise ValueError(f"{path}: line {lineno}: expected {len(header)} cells, got {len(row)}")
        vals = []
        for j, cell in enumerate(row):
            try:
                vals.append(float(cell))
            except ValueError:
                raise ValueError(f"{path}: line {lineno}, column {j + 1} ({header[j]}): "
                                 f"non-numeric value {cell!r}") from None
        lab = vals.pop(li)
        if lab != int(lab) or lab < 0:
            raise ValueError(f"{path}: line {lineno}: label must be a non-negative integer")
        xs.append(vals)
        ys.append(int(lab))
    return np.array(xs, dtype=np.float64), np.array(ys, dtype=np.int64)


def _read_pgm_dir(path, labels_file):
    from .diagnostics import read_pgm

    xs, ys = [], []
    with open(os.path.join(path, labels_file), newline="") as fh:
        for lineno, row in enumerate(csv.reader(fh), start=1):
            if not row or row[0].startswith("#"):
                continue
            if len(row) != 2:
                raise ValueError(f"{labels_file}: line {lineno}: expected 'file,label'")
            try:
                lab = int(row[1])
            except ValueError:
                raise ValueError(f"{labels_file}: line {lineno}, column 2: bad label {row[1]!r}") from None
            xs.append(read_pgm(os.path.join(path, row[0].strip())).ravel())
            ys.append(lab)
    if len({x.size for x in xs}) > 1:
        raise ValueError("images in a pgm_dir dataset must share one size")
    return np.array(xs), np.array(ys, dtype=np.int64)


def load_dataset(spec: dict) -> Dataset:
    """``{"synthetic": kind, "n", "noise", "seed"}``, ``{"csv": path}`` or ``{"pgm_dir": path}``.

    Train/test is an 80/20 split by a permutation seeded from ``seed``.
    """
    seed = int(spec.get("seed", 0))
    if "synthetic" in spec:
        kind = spec["synthetic"]
        if kind not in SYNTHETIC:
            raise ValueError(f"unknown synthetic dataset {kind!r}")
        n = int(spec.get("n", 400))
        if n < 2:
            raise ValueError("need at least two samples")
        x, y = SYNTHETIC[kind](n, float(spec.get("noise", 0.0)), Rng(seed))
    elif "csv" in spec:
        x, y = _read_csv(spec["csv"], spec.get("label_column", "label"))
    elif "pgm_dir" in spec:
        x, y = _read_pgm_dir(spec["pgm_dir"], spec.get("labels", "labels.csv"))
    else:
        raise ValueError("dataset spec needs one of 'synthetic', 'csv', 'pgm_dir'")
    if len(y) == 0:
        raise ValueError("dataset is empty")
    tr, te = _split(len(y), seed)
    return Dataset(x, y, int(y.max()) + 1, tr, te)


# ---------------------------------------------------------------------------
# loss and update


def cross_entropy_loss(logits, label: int):
    """Softmax cross-entropy of one sample and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    if not 0 <= label < logits.shape[-1]:
        raise ValueError(f"label {label} out of range for {logits.shape[-1]} classes")
    m = logits.max()
    lse = m + math.log(np.exp(logits - m).sum())
    p = np.exp(logits - lse)
    g = p.copy()
    g[label] -= 1.0
    return lse - logits[label], g


def batch_cross_entropy(logits, labels):
    """Mean loss over rows and the gradient of that mean."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if labels.min() < 0 or labels.max() >= logits.shape[1]:
        raise ValueError("label out of range")
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    rows = np.arange(len(labels))
    loss = float(np.mean(lse[:, 0] - logits[rows, labels]))
    g = np.exp(logits - lse)
    g[rows, labels] -= 1.0
    return loss, g / len(labels)


def sgd_step(theta, grads, lr: float, weight_decay: float = 0.0):
    """``theta - lr * (mean(grads) + weight_decay * theta)``; ``grads`` is one gradient or a stack."""
    theta = np.asarray(theta, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    g = grads if grads.shape == theta.shape else grads.mean(axis=0)
    if g.shape != theta.shape:
        raise ValueError("gradient shape does not match theta")
    return theta - lr * (g + weight_decay * theta)


# ---------------------------------------------------------------------------
# network


@dataclass
class TrainConfig:
    dataset: dict = dc_field(default_factory=lambda: {"synthetic": "spirals", "n": 400,
                                                      "noise": 0.0, "seed": 0})
    batch_size: int = 32
    lr: float = 0.1
    weight_decay: float = 0.0
    epochs: int = 100
    seed: int = 0
    pipeline: str = "dto"
    policy: str = "store_all"
    scheme: str = "euler"
    nsteps: int = 4
    horizon: float = 1.0
    width: int = 8
    n_blocks: int = 2
    act: str = "relu"

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1:
            raise ValueError("batch size must be >= 1")
        if self.pipeline not in PIPELINES:
            raise ValueError(f"unknown pipeline {self.pipeline!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class OdeNet:
    """Lift, then ODE blocks separated by linear transitions, then a linear classifier.

    All parameters live in one flat ``theta``; ``layout`` lists
    ``(name, offset, size)`` per layer.
    """

    def __init__(self, layers, names=None):
        self.layers = list(layers)
        self.names = names or [f"layer{i}" for i in range(len(self.layers))]
        sizes = [self._field(l).n_params for l in self.layers]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        self.theta = np.concatenate([self._field(l).theta for l in self.layers])

    @staticmethod
    def _field(layer) -> VectorField:
        return layer.field if isinstance(layer, OdeBlock) else layer

    @property
    def layout(self):
        return [(n, int(self.offsets[i]), int(self.offsets[i + 1] - self.offsets[i]))
                for i, n in enumerate(self.names)]

    def split(self, theta=None):
        theta = self.theta if theta is None else theta
        return [theta[self.offsets[i]:self.offsets[i + 1]] for i in range(len(self.layers))]

    @classmethod
    def build(cls, n_in: int, n_classes: int, width: int = 8, n_blocks: int = 2, nsteps: int = 4,
              scheme="euler", horizon: float = 1.0, act: str = "relu", seed: int = 0) -> "OdeNet":
        rng = Rng(seed)

        def dense(n_out, n_i, a="identity"):
            w = rng.normal(n_out * n_i).reshape(n_out, n_i) / math.sqrt(n_i)
            return Dense(w, np.zeros(n_out), a)

        layers, names = [dense(width, n_in)], ["lift"]
        for b in range(n_blocks):
            if b > 0:
                layers.append(dense(width, width))
                names.append(f"transition{b}")
            layers.append(OdeBlock(dense(width, width, act), horizon, scheme, nsteps))
            names.append(f"ode{b}")
        layers.append(dense(n_classes, width))
        names.append("head")
        return cls(layers, names)

    def forward(self, x, theta=None):
        z = np.asarray(x, dtype=np.float64)
        from .solvers import flow_forward

        for layer, th in zip(self.layers, self.split(theta)):
            if isinstance(layer, OdeBlock):
                z = flow_forward(layer.field, th, z, layer.horizon, layer.scheme, layer.nsteps,
                                 keep_states=False).final
            else:
                z = layer(z, th)
        return z

    def gradient(self, x, labels, theta=None, pipeline="dto", policy="store_all"):
        """Mean cross-entropy over the batch and its gradient w.r.t. the flat ``theta``."""
        thetas = self.split(theta)
        rec = forward_pass(self.layers, thetas, x, policy=policy, pipeline=pipeline)
        loss, g = batch_cross_entropy(rec.output, labels)
        res = multi_block_backprop(self.layers, thetas, rec, g)
        return loss, np.concatenate(res.grads), res

    def accuracy(self, x, y, theta=None) -> float:
        return float(np.mean(np.argmax(self.forward(x, theta), axis=1) == y))

    def loss(self, x, y, theta=None) -> float:
        return batch_cross_entropy(self.forward(x, theta), y)[0]


def save_params(path, net: OdeNet, extra: dict | None = None) -> None:
    """One JSON header line (layout, dtype, count) followed by raw little-endian float64."""
    header = {"dtype": "<f8", "count": int(net.theta.size), "layout": net.layout, **(extra or {})}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        fh.write(net.theta.astype("<f8").tobytes())


def load_params(path):
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        data = np.frombuffer(fh.read(), dtype=header["dtype"])
    if data.size != header["count"]:
        raise ValueError(f"{path}: expected {header['count']} values, found {data.size}")
    return header, data.astype(np.float64)


@dataclass
class TrainResult:
    curve: list
    diverged: bool
    final_train_loss: float
    final_train_acc: float
    final_test_acc: float
    theta: np.ndarray
    iterations: int
    note: str = ""

    def curve_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "iter", "train_loss", "train_acc", "test_acc"])
        for r in self.curve:
            w.writerow([r["epoch"], r["iter"], repr(r["train_loss"]), repr(r["train_acc"]),
                        repr(r["test_acc"])])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def summary(self) -> dict:
        return {"diverged": self.diverged, "final_train_loss": _num(self.final_train_loss),
                "final_train_acc": self.final_train_acc, "final_test_acc": self.final_test_acc,
                "iterations": self.iterations, "note": self.note}


def _num(x):
    return x if math.isfinite(x) else str(x)


def train(net: OdeNet, config: TrainConfig, data: Dataset | None = None,
          max_iters: int | None = None) -> TrainResult:
    """Plain mini-batch SGD; evaluates on the full train and test sets after every epoch.

    A non-finite loss or a failed reverse reconstruction ends training early
    with ``diverged=True`` and the curve so far.
    """
    data = data or load_dataset(config.dataset)
    xtr, ytr, xte, yte = data.x_train, data.y_train, data.x_test, data.y_test
    rng = Rng(config.seed)
    theta = net.theta.copy()
    curve, it, diverged, note = [], 0, False, ""

    def record(epoch):
        curve.append({"epoch": epoch, "iter": it, "train_loss": net.loss(xtr, ytr, theta),
                      "train_acc": net.accuracy(xtr, ytr, theta),
                      "test_acc": net.accuracy(xte, yte, theta) if len(yte) else math.nan})

    record(0)
    for epoch in range(1, config.epochs + 1):
        perm = rng.permutation(len(ytr))
        for s in range(0, len(perm), config.batch_size):
            idx = perm[s:s + config.batch_size]
            try:
                with np.errstate(over="ignore", invalid="ignore"):
                    loss, g, _ = net.gradient(xtr[idx], ytr[idx], theta, config.pipeline, config.policy)
            except (ReconstructionError, BlowUpError) as exc:
                diverged, note = True, str(exc)
                break
            if not (math.isfinite(loss) and np.all(np.isfinite(g))):
                diverged, note = True, f"non-finite loss at iteration {it}"
                break
            theta = sgd_step(theta, g, config.lr, config.weight_decay)
            it += 1
            if max_iters is not None and it >= max_iters:
                break
        if diverged:
            break
        with np.errstate(over="ignore", invalid="ignore"):
            record(epoch)
        if not math.isfinite(curve[-1]["train_loss"]):
            diverged, note = True, f"non-finite loss after epoch {epoch}"
            break
        if max_iters is not None and it >= max_iters:
            break
    last = curve[-1]
    # a non-finite final evaluation ranks as +inf
    final_loss = last["train_loss"] if math.isfinite(last["train_loss"]) else math.inf
    return TrainResult(curve, diverged, final_loss, last["train_acc"], last["test_acc"], theta, it, note)


def build_for(config: TrainConfig, data: Dataset) -> OdeNet:
    return OdeNet.build(data.x.shape[1], data.n_classes, config.width, config.n_blocks,
                        config.nsteps, config.scheme, config.horizon, config.act, config.seed)
