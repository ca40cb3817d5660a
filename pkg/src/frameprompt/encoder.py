"""Small frozen convolutional encoder.

Architecture is fixed: conv3x3(C->16) / relu / pool2 / conv3x3(16->32) /
relu / pool2 / flatten / linear -> 64-d feature, plus a 16-way linear head
used only during pretraining and by the head-freezing adaptation mode.
Spatial dims must be divisible by 4 (two pooling stages).

Weights live in an ordered dict of read-only float64 arrays. The on-disk
format is magic "DAMW", u32 version, u32 record count, then per array a u32
rank, rank u32 extents and the raw little-endian float64 payload, finished
by a u64 fingerprint of the record bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from . import tensor as T
from .errors import (BadMagicError, DataError, FingerprintMismatchError,
                     FormatError, ShapeError, TruncatedFileError)

MAGIC = b"DAMW"
VERSION = 1

PARAM_ORDER = ("conv1_w", "conv1_b", "conv2_w", "conv2_b",
               "fc_w", "fc_b", "head_w", "head_b")


@dataclass(frozen=True)
class EncoderSpec:
    in_channels: int = 3
    height: int = 32
    width: int = 32
    feature_dim: int = 64
    head_dim: int = 16

    def __post_init__(self):
        if self.height % 4 or self.width % 4:
            raise ShapeError(f"encoder input must be divisible by 4, got "
                             f"({self.height}, {self.width})")

    @property
    def fc_in(self) -> int:
        return 32 * (self.height // 4) * (self.width // 4)

    def param_shapes(self) -> dict:
        return {
            "conv1_w": (16, self.in_channels, 3, 3), "conv1_b": (16,),
            "conv2_w": (32, 16, 3, 3), "conv2_b": (32,),
            "fc_w": (self.fc_in, self.feature_dim), "fc_b": (self.feature_dim,),
            "head_w": (self.feature_dim, self.head_dim), "head_b": (self.head_dim,),
        }


def _records_bytes(weights: dict) -> bytes:
    chunks = []
    for name in PARAM_ORDER:
        arr = np.ascontiguousarray(weights[name], dtype=np.float64)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(arr.astype("<f8").tobytes())
    return b"".join(chunks)


def fingerprint_of(weights: dict) -> int:
    digest = hashlib.sha256(_records_bytes(weights)).digest()
    return struct.unpack("<Q", digest[:8])[0]


def _freeze_arrays(weights: dict) -> dict:
    out = {}
    for name in PARAM_ORDER:
        arr = np.ascontiguousarray(weights[name], dtype=np.float64)
        arr.setflags(write=False)
        out[name] = arr
    return out


class FrozenEncoder:
    """Immutable trained encoder. All forward passes are pure."""

    def __init__(self, spec: EncoderSpec, weights: dict, pretrain_dataset_id: str = "",
                 train_accuracy: float = 0.0, seed: int = 0):
        shapes = spec.param_shapes()
        for name in PARAM_ORDER:
            if name not in weights:
                raise FormatError(f"missing weight array {name}")
            if tuple(weights[name].shape) != shapes[name]:
                raise ShapeError(f"{name}: stored {tuple(weights[name].shape)} "
                                 f"vs spec {shapes[name]}")
        self.spec = spec
        self.weights = _freeze_arrays(weights)
        self.fingerprint = fingerprint_of(self.weights)
        self.pretrain_dataset_id = pretrain_dataset_id
        self.train_accuracy = float(train_accuracy)
        self.seed = int(seed)
        self.tau_star: float | None = None
        self.f0 = self.forward_features(np.zeros((spec.in_channels, spec.height, spec.width)))

    # pure ndarray path; bit-identical to the Var path because both run the
    # same kernel calls and numpy broadcast expressions in the same order
    def _features_batch(self, x: np.ndarray) -> np.ndarray:
        w = self.weights
        y = kernels.conv2d_forward(x, w["conv1_w"], 1, 1) + w["conv1_b"][None, :, None, None]
        y = np.where(y > 0, y, 0.0)
        y, _ = kernels.maxpool2_forward(y)
        y = kernels.conv2d_forward(y, w["conv2_w"], 1, 1) + w["conv2_b"][None, :, None, None]
        y = np.where(y > 0, y, 0.0)
        y, _ = kernels.maxpool2_forward(y)
        flat = y.reshape(y.shape[0], -1)
        return flat @ w["fc_w"] + w["fc_b"]

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        s = self.spec
        x = np.ascontiguousarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[None]
        if x.ndim != 4 or x.shape[1:] != (s.in_channels, s.height, s.width):
            raise ShapeError(f"encoder expects (B,{s.in_channels},{s.height},{s.width}), "
                             f"got {x.shape}")
        return x

    def forward_features(self, x: np.ndarray, chunk: int = 128) -> np.ndarray:
        squeeze = np.asarray(x).ndim == 3
        x = self._check_input(x)
        parts = [self._features_batch(x[i:i + chunk]) for i in range(0, len(x), chunk)]
        feats = np.concatenate(parts) if len(parts) > 1 else parts[0]
        return feats[0] if squeeze else feats

    def features_var(self, tape: T.Tape, x_var: T.Var) -> T.Var:
        """Feature forward on tape input (gradient flows to x_var only)."""
        w = self.weights
        y = T.conv2d(x_var, w["conv1_w"], 1, 1)
        y = T.bias_add(y, w["conv1_b"])
        y = T.relu(y)
        y = T.maxpool2d(y)
        y = T.conv2d(y, w["conv2_w"], 1, 1)
        y = T.bias_add(y, w["conv2_b"])
        y = T.relu(y)
        y = T.maxpool2d(y)
        flat = T.reshape(y, (y.shape[0], -1))
        return T.bias_add(T.matmul(flat, w["fc_w"]), w["fc_b"])

    def head_logits(self, feats: np.ndarray) -> np.ndarray:
        return feats @ self.weights["head_w"] + self.weights["head_b"]

    def probe_channel_variance(self, count: int, seed: int) -> np.ndarray:
        """Unbiased per-channel feature variance over standard-normal noise."""
        if count < 2:
            raise DataError(f"probe needs at least 2 noise images, got {count}")
        s = self.spec
        noise = T.randn((count, s.in_channels, s.height, s.width), seed)
        feats = self.forward_features(noise)
        return feats.var(axis=0, ddof=1)

    # ---- persistence ----

    def save(self, path: str):
        body = _records_bytes(self.weights)
        blob = MAGIC + struct.pack("<II", VERSION, len(PARAM_ORDER)) + body
        blob += struct.pack("<Q", self.fingerprint)
        with open(path, "wb") as fh:
            fh.write(blob)
        meta = {
            "in_channels": self.spec.in_channels, "height": self.spec.height,
            "width": self.spec.width, "feature_dim": self.spec.feature_dim,
            "head_dim": self.spec.head_dim,
            "pretrain_dataset_id": self.pretrain_dataset_id,
            "train_accuracy": self.train_accuracy,
            "fingerprint": int(self.fingerprint),
            "seed": self.seed,
            "f0": [float(v) for v in self.f0],
        }
        with open(meta_path(path), "w") as fh:
            json.dump(meta, fh, indent=1, sort_keys=True)


def meta_path(weights_path: str) -> str:
    return str(weights_path) + ".meta.json"


def calib_path(weights_path: str) -> str:
    base = str(weights_path)
    stem = base[: base.rfind(".")] if "." in base.rsplit("/", 1)[-1] else base
    return stem + ".calib.json"


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise TruncatedFileError(f"file ends at byte {len(self.blob)}, "
                                     f"needed {self.pos + n}")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self) -> int:
        return struct.unpack("<I", self.take(4))[0]

    def u64(self) -> int:
        return struct.unpack("<Q", self.take(8))[0]


def load_weights(path: str) -> tuple[dict, int]:
    """Parse a DAMW file; returns (weights dict, fingerprint)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob)
    if r.take(4) != MAGIC:
        raise BadMagicError(f"bad magic in {path}")
    version = r.u32()
    if version != VERSION:
        raise FormatError(f"unsupported weight file version {version}")
    count = r.u32()
    if count != len(PARAM_ORDER):
        raise FormatError(f"expected {len(PARAM_ORDER)} arrays, file has {count}")
    body_start = r.pos
    weights = {}
    for name in PARAM_ORDER:
        rank = r.u32()
        if rank > 8:
            raise FormatError(f"{name}: implausible rank {rank}")
        extents = struct.unpack(f"<{rank}I", r.take(4 * rank))
        n = int(np.prod(extents, dtype=np.int64)) if rank else 1
        payload = r.take(8 * n)
        weights[name] = np.frombuffer(payload, dtype="<f8").reshape(extents).copy()
    body_end = r.pos
    stored = r.u64()
    digest = hashlib.sha256(blob[body_start:body_end]).digest()
    actual = struct.unpack("<Q", digest[:8])[0]
    if stored != actual:
        raise FingerprintMismatchError(
            f"fingerprint mismatch: stored {stored:#x}, computed {actual:#x}")
    return weights, stored


def load_encoder(path: str) -> FrozenEncoder:
    weights, fp = load_weights(path)
    try:
        with open(meta_path(path)) as fh:
            meta = json.load(fh)
    except FileNotFoundError:
        meta = _infer_meta(weights)
    spec = EncoderSpec(in_channels=int(meta["in_channels"]), height=int(meta["height"]),
                       width=int(meta["width"]))
    enc = FrozenEncoder(spec, weights,
                        pretrain_dataset_id=meta.get("pretrain_dataset_id", ""),
                        train_accuracy=meta.get("train_accuracy", 0.0),
                        seed=meta.get("seed", 0))
    if enc.fingerprint != fp:
        raise FingerprintMismatchError("weights changed between parse and construction")
    if "f0" in meta:
        golden = np.asarray(meta["f0"], dtype=np.float64)
        if golden.shape != enc.f0.shape or not np.array_equal(golden, enc.f0):
            raise FingerprintMismatchError("stored zero-input response differs from "
                                           "recomputed one")
    return enc


def _infer_meta(weights: dict) -> dict:
    # no sidecar: recover a square spatial size from the fc fan-in
    cin = weights["conv1_w"].shape[1]
    fc_in = weights["fc_w"].shape[0]
    side4 = np.sqrt(fc_in / 32)
    hw = int(round(side4)) * 4
    if 32 * (hw // 4) ** 2 != fc_in:
        raise FormatError("cannot infer input size; sidecar metadata required")
    return {"in_channels": cin, "height": hw, "width": hw}


def _init_params(spec: EncoderSpec, seed: int) -> dict:
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in spec.param_shapes().items():
        if name.endswith("_b"):
            params[name] = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
            params[name] = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
    return params


def _logits_var(tape: T.Tape, params: dict, x: np.ndarray):
    pvars = {k: tape.var(v, requires_grad=True) for k, v in params.items()}
    xv = tape.var(x)
    y = T.conv2d(xv, pvars["conv1_w"], 1, 1)
    y = T.bias_add(y, pvars["conv1_b"])
    y = T.relu(y)
    y = T.maxpool2d(y)
    y = T.conv2d(y, pvars["conv2_w"], 1, 1)
    y = T.bias_add(y, pvars["conv2_b"])
    y = T.relu(y)
    y = T.maxpool2d(y)
    flat = T.reshape(y, (y.shape[0], -1))
    feats = T.bias_add(T.matmul(flat, pvars["fc_w"]), pvars["fc_b"])
    logits = T.bias_add(T.matmul(feats, pvars["head_w"]), pvars["head_b"])
    return logits, pvars


def pretrain(dataset, epochs: int, seed: int, lr: float = 1e-3,
             batch_size: int = 64, spec: EncoderSpec | None = None) -> FrozenEncoder:
    """Supervised pretraining with Adam; horizontal flip is the only
    augmentation. Returns the frozen result; same seed gives the same bits."""
    from .optim import Adam

    if len(dataset) == 0:
        raise DataError("pretraining dataset is empty")
    if epochs < 1:
        raise DataError(f"epochs must be >= 1, got {epochs}")
    if spec is None:
        spec = EncoderSpec(in_channels=dataset.images.shape[1],
                           height=dataset.images.shape[2],
                           width=dataset.images.shape[3])
    if dataset.class_count > spec.head_dim:
        raise DataError(f"dataset has {dataset.class_count} classes, head fits "
                        f"{spec.head_dim}")
    params = _init_params(spec, seed)
    opt = Adam(lr=lr)
    n = len(dataset)
    for epoch in range(epochs):
        erng = np.random.default_rng([seed, epoch, 0xB1])
        order = erng.permutation(n)
        flips = erng.random(n) < 0.5
        for start in range(0, n, batch_size):
            ids = order[start:start + batch_size]
            xb = dataset.images[ids].copy()
            fl = flips[start:start + len(ids)]
            xb[fl] = xb[fl][:, :, :, ::-1]
            yb = dataset.labels[ids]
            tape = T.Tape(seed)
            logits, pvars = _logits_var(tape, params, xb)
            loss = T.cross_entropy(logits, yb)
            T.backward(loss)
            for name in PARAM_ORDER:
                params[name] = opt.step(name, params[name], pvars[name].grad)
    enc = FrozenEncoder(spec, params, pretrain_dataset_id=dataset.id, seed=seed)
    hits = 0
    for start in range(0, n, 256):
        feats = enc.forward_features(dataset.images[start:start + 256])
        pred = np.argmax(enc.head_logits(feats), axis=1)
        hits += int((pred == dataset.labels[start:start + 256]).sum())
    enc.train_accuracy = hits / n
    return enc
