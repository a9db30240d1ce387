"""Causal dilated TCN classifier in numpy: initialization, forward and
backward passes, Adam training, per-session prediction and the model file.

Weights are named arrays:
    block{i}.conv1.w (out, in, k)   block{i}.conv1.b (out,)
    block{i}.conv2.w (out, out, k)  block{i}.conv2.b (out,)
    block{i}.proj.w  (out, in)      block{i}.proj.b  (out,)   only when in != out
    dense.w (units, C)  dense.b (units,)
    out.w (classes, units)  out.b (classes,)
Kernel tap j of a convolution with dilation d reads the frame j*d steps back.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

import config
from classifiers import register_classifier
from config import PreprocessConfig, TcnConfig, TrainConfig, WindowConfig
from core_types import (
    NUM_CHANNELS,
    NUM_PHASES,
    CorruptFile,
    GaitPhase,
    InsufficientData,
    IoError,
    MissingClass,
    SessionRecording,
    SessionTooShort,
    ShapeError,
    VersionMismatch,
    WindowTensor,
)
from preprocess import NormStats, fit_normalizer, preprocess_session, window_array

logger = logging.getLogger(__name__)

PROB_CLAMP = 1e-12


# ---------------------------------------------------------------------------
# Weights
# ---------------------------------------------------------------------------

def param_shapes(cfg: TcnConfig) -> list[tuple[str, tuple[int, ...]]]:
    shapes = []
    c_in = cfg.input_channels
    c = cfg.channels_per_block
    k = cfg.kernel_size
    for i in range(cfg.num_blocks):
        p = f"block{i}"
        shapes += [(f"{p}.conv1.w", (c, c_in, k)), (f"{p}.conv1.b", (c,)),
                   (f"{p}.conv2.w", (c, c, k)), (f"{p}.conv2.b", (c,))]
        if c_in != c:
            shapes += [(f"{p}.proj.w", (c, c_in)), (f"{p}.proj.b", (c,))]
        c_in = c
    shapes += [("dense.w", (cfg.dense_units, c)), ("dense.b", (cfg.dense_units,)),
               ("out.w", (cfg.num_classes, cfg.dense_units)), ("out.b", (cfg.num_classes,))]
    return shapes


def param_count(cfg: TcnConfig) -> int:
    return sum(int(np.prod(shape)) for _, shape in param_shapes(cfg))


@dataclass
class TcnWeights:
    arrays: dict[str, np.ndarray]

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def __contains__(self, name: str) -> bool:
        return name in self.arrays

    def names(self) -> list[str]:
        return list(self.arrays)

    def count(self) -> int:
        return sum(a.size for a in self.arrays.values())

    def copy(self) -> "TcnWeights":
        return TcnWeights({k: v.copy() for k, v in self.arrays.items()})

    def astype(self, dtype) -> "TcnWeights":
        return TcnWeights({k: v.astype(dtype) for k, v in self.arrays.items()})

    @classmethod
    def zeros(cls, cfg: TcnConfig) -> "TcnWeights":
        return cls({name: np.zeros(shape) for name, shape in param_shapes(cfg)})


def _fan_in(shape: tuple[int, ...]) -> int:
    return int(np.prod(shape[1:]))


def init_weights(cfg: TcnConfig, seed: int) -> TcnWeights:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(cfg):
        if name.endswith(".b"):
            arrays[name] = np.zeros(shape)
        else:
            bound = np.sqrt(6.0 / _fan_in(shape))
            arrays[name] = rng.uniform(-bound, bound, size=shape)
    return TcnWeights(arrays)


# ---------------------------------------------------------------------------
# Layers
# ---------------------------------------------------------------------------

def dilated_causal_conv(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None,
                        dilation: int = 1) -> np.ndarray:
    """x: (T, C_in) or (B, T, C_in); w: (C_out, C_in, k). Output keeps T."""
    single = x.ndim == 2
    if single:
        x = x[None]
    n, T, c_in = x.shape
    c_out, _, k = w.shape
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros((n, pad, c_in), dtype=x.dtype), x], axis=1) if pad else x

    out = np.zeros((n * T, c_out), dtype=np.result_type(x, w))
    for j in range(k):
        start = pad - j * dilation
        seg = np.ascontiguousarray(xp[:, start:start + T, :]).reshape(n * T, c_in)
        out += seg @ w[:, :, j].T
    if b is not None:
        out += b
    out = out.reshape(n, T, c_out)
    return out[0] if single else out


def _conv_backward(x: np.ndarray, w: np.ndarray, dilation: int, dout: np.ndarray):
    n, T, c_in = x.shape
    c_out, _, k = w.shape
    pad = (k - 1) * dilation
    xp = np.concatenate([np.zeros((n, pad, c_in)), x], axis=1) if pad else x
    dflat = dout.reshape(n * T, c_out)

    gw = np.zeros_like(w)
    dxp = np.zeros((n, T + pad, c_in))
    for j in range(k):
        start = pad - j * dilation
        seg = np.ascontiguousarray(xp[:, start:start + T, :]).reshape(n * T, c_in)
        gw[:, :, j] = dflat.T @ seg
        dxp[:, start:start + T, :] += (dflat @ w[:, :, j]).reshape(n, T, c_in)
    return gw, dflat.sum(axis=0), dxp[:, pad:, :]


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def _spatial_mask(rng: np.random.Generator, n: int, channels: int, p: float, dtype):
    keep = rng.random((n, 1, channels)) >= p
    return keep.astype(dtype) / (1.0 - p)


def _forward_batch(w: TcnWeights, cfg: TcnConfig, x: np.ndarray,
                   dropout_rng: np.random.Generator | None = None):
    """x is already normalized, (B, h, C). Returns (probs, cache)."""
    use_dropout = dropout_rng is not None and cfg.spatial_dropout > 0
    blocks = []
    h = x
    for i, d in enumerate(cfg.dilations):
        p = f"block{i}"
        inp = h
        a1 = dilated_causal_conv(inp, w[f"{p}.conv1.w"], w[f"{p}.conv1.b"], d)
        m1 = _spatial_mask(dropout_rng, a1.shape[0], a1.shape[2], cfg.spatial_dropout,
                           a1.dtype) if use_dropout else None
        h1 = np.maximum(a1, 0.0)
        if m1 is not None:
            h1 = h1 * m1
        a2 = dilated_causal_conv(h1, w[f"{p}.conv2.w"], w[f"{p}.conv2.b"], d)
        m2 = _spatial_mask(dropout_rng, a2.shape[0], a2.shape[2], cfg.spatial_dropout,
                           a2.dtype) if use_dropout else None
        h2 = np.maximum(a2, 0.0)
        if m2 is not None:
            h2 = h2 * m2
        if f"{p}.proj.w" in w:
            res = inp @ w[f"{p}.proj.w"].T + w[f"{p}.proj.b"]
        else:
            res = inp
        h = h2 + res
        blocks.append((inp, a1, m1, h1, a2, m2))

    feat = h[:, -1, :]
    zpre = feat @ w["dense.w"].T + w["dense.b"]
    z = np.maximum(zpre, 0.0)
    logits = z @ w["out.w"].T + w["out.b"]
    probs = softmax(logits)
    cache = {"blocks": blocks, "h_shape": h.shape, "feat": feat, "zpre": zpre, "z": z,
             "logits": logits}
    return probs, cache


def _backward(w: TcnWeights, cfg: TcnConfig, cache: dict, dlogits: np.ndarray) -> TcnWeights:
    g = {}
    z, zpre, feat = cache["z"], cache["zpre"], cache["feat"]
    g["out.w"] = dlogits.T @ z
    g["out.b"] = dlogits.sum(axis=0)
    dzpre = (dlogits @ w["out.w"]) * (zpre > 0)
    g["dense.w"] = dzpre.T @ feat
    g["dense.b"] = dzpre.sum(axis=0)

    dh = np.zeros(cache["h_shape"])
    dh[:, -1, :] = dzpre @ w["dense.w"]

    for i in reversed(range(cfg.num_blocks)):
        p = f"block{i}"
        d = cfg.dilations[i]
        inp, a1, m1, h1, a2, m2 = cache["blocks"][i]

        dr2 = dh * m2 if m2 is not None else dh
        da2 = dr2 * (a2 > 0)
        g[f"{p}.conv2.w"], g[f"{p}.conv2.b"], dh1 = _conv_backward(h1, w[f"{p}.conv2.w"], d, da2)
        dr1 = dh1 * m1 if m1 is not None else dh1
        da1 = dr1 * (a1 > 0)
        g[f"{p}.conv1.w"], g[f"{p}.conv1.b"], dinp = _conv_backward(inp, w[f"{p}.conv1.w"], d, da1)

        if f"{p}.proj.w" in w:
            n, T, c_in = inp.shape
            dflat = dh.reshape(n * T, -1)
            g[f"{p}.proj.w"] = dflat.T @ inp.reshape(n * T, c_in)
            g[f"{p}.proj.b"] = dflat.sum(axis=0)
            dinp = dinp + dh @ w[f"{p}.proj.w"]
        else:
            dinp = dinp + dh
        dh = dinp

    return TcnWeights({name: g[name] for name in w.names()})


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass
class TcnModel:
    arch: TcnConfig
    weights: TcnWeights
    norm: NormStats
    window: WindowConfig = WindowConfig()
    preprocess: PreprocessConfig = PreprocessConfig()
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.window.h < self.arch.receptive_field:
            raise ValueError(f"window h={self.window.h} is shorter than the receptive "
                             f"field {self.arch.receptive_field}")

    def as_dtype(self, dtype) -> "TcnModel":
        return TcnModel(self.arch, self.weights.astype(dtype),
                        NormStats(self.norm.mean.astype(dtype), self.norm.std.astype(dtype)),
                        self.window, self.preprocess, dict(self.metadata))


def _normalize(model: TcnModel, x: np.ndarray) -> np.ndarray:
    dtype = model.weights["out.w"].dtype
    return ((np.asarray(x, dtype=dtype) - model.norm.mean) / model.norm.std).astype(dtype, copy=False)


def _check_window(model: TcnModel, data: np.ndarray):
    expected = (model.window.h, model.arch.input_channels)
    if data.shape[-2:] != expected:
        raise ShapeError(f"window shape {data.shape[-2:]} does not match {expected}")


def forward(model: TcnModel, window, mode: str = "infer",
            dropout_rng: np.random.Generator | None = None):
    """Class probabilities for one window (raw, normalization applied here).

    In "train" mode dropout is active when a generator is given, and the
    cached activations are returned alongside the probabilities.
    """
    data = window.data if isinstance(window, WindowTensor) else np.asarray(window)
    _check_window(model, data)
    x = _normalize(model, data)[None]
    if mode == "train":
        probs, cache = _forward_batch(model.weights, model.arch, x, dropout_rng)
        return probs[0], cache
    if mode != "infer":
        raise ValueError(f"unknown mode '{mode}'")
    probs, _ = _forward_batch(model.weights, model.arch, x, None)
    return probs[0]


def classify_window(model: TcnModel, data: np.ndarray) -> np.ndarray:
    """Inference on one (h, 9) window; the same path serves offline and online runs."""
    x = _normalize(model, np.ascontiguousarray(data))[None]
    probs, _ = _forward_batch(model.weights, model.arch, x, None)
    return probs[0]


def predict_proba(model: TcnModel, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    """Batched inference over raw windows (N, h, 9)."""
    _check_window(model, x)
    out = []
    for start in range(0, x.shape[0], batch_size):
        xb = _normalize(model, x[start:start + batch_size])
        probs, _ = _forward_batch(model.weights, model.arch, xb, None)
        out.append(probs)
    if not out:
        return np.empty((0, model.arch.num_classes))
    return np.concatenate(out)


def loss_and_grad(model: TcnModel, x: np.ndarray, y: np.ndarray,
                  dropout_rng: np.random.Generator | None = None
                  ) -> tuple[float, TcnWeights, np.ndarray]:
    """Mean categorical cross-entropy over a batch of raw windows.

    y holds phase codes 1-5. Returns (loss, gradients, probabilities).
    """
    if len(x) == 0:
        raise InsufficientData("empty batch")
    _check_window(model, x)
    xb = _normalize(model, x)
    probs, cache = _forward_batch(model.weights, model.arch, xb, dropout_rng)
    n = xb.shape[0]
    idx = np.asarray(y, dtype=np.int64) - 1
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(n), idx], PROB_CLAMP))))

    dlogits = probs.copy()
    dlogits[np.arange(n), idx] -= 1.0
    dlogits /= n
    grads = _backward(model.weights, model.arch, cache, dlogits)
    return loss, grads, probs


def batch_from_windows(windows: list[WindowTensor]) -> tuple[np.ndarray, np.ndarray]:
    x = np.stack([w.data for w in windows])
    y = np.array([int(w.label) for w in windows], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass
class SessionWindows:
    """Labeled training windows of one session, kept together for the split."""
    session_id: str
    x: np.ndarray           # (N, h, 9), raw measurement vectors
    y: np.ndarray           # (N,), phase codes

    def __len__(self) -> int:
        return int(self.x.shape[0])


def windows_from_session(session: SessionRecording, session_id: str,
                         window: WindowConfig = WindowConfig(),
                         pre: PreprocessConfig = PreprocessConfig()) -> SessionWindows:
    if session.labels is None:
        raise InsufficientData(f"session {session_id} has no labels")
    vectors = preprocess_session(session, pre, window.sample_rate_hz)
    x = window_array(vectors, window.h, window.stride)
    last = np.arange(x.shape[0]) * window.stride + window.h - 1
    codes = np.array([int(p) for p in session.labels], dtype=np.int64)
    return SessionWindows(session_id, x, codes[last] if len(last) else np.empty(0, np.int64))


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    best_epoch: int = 0
    train_sessions: list[str] = field(default_factory=list)
    val_sessions: list[str] = field(default_factory=list)

    def write_csv(self, path: Path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            f.write("epoch,train_loss,train_acc,val_loss,val_acc\n")
            for r in self.epochs:
                f.write(f"{r.epoch},{r.train_loss!r},{r.train_acc!r},{r.val_loss!r},{r.val_acc!r}\n")


class _Adam:
    def __init__(self, cfg: TrainConfig, weights: TcnWeights):
        self.cfg = cfg
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in weights.arrays.items()}
        self.v = {k: np.zeros_like(v) for k, v in weights.arrays.items()}

    def step(self, weights: TcnWeights, grads: TcnWeights):
        c = self.cfg
        self.t += 1
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for name, p in weights.arrays.items():
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1.0 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1.0 - c.beta2) * g * g
            p -= c.learning_rate * (self.m[name] / bc1) / (np.sqrt(self.v[name] / bc2) + c.epsilon)


def split_sessions(dataset: list[SessionWindows], fraction: float, seed: int
                   ) -> tuple[list[SessionWindows], list[SessionWindows]]:
    if len(dataset) < 2:
        raise InsufficientData(f"need at least 2 sessions for a session-level split, "
                               f"got {len(dataset)}")
    ordered = sorted(dataset, key=lambda s: s.session_id)
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(ordered))
    n_val = min(max(1, int(round(fraction * len(ordered)))), len(ordered) - 1)
    val = [ordered[i] for i in sorted(perm[:n_val])]
    train = [ordered[i] for i in sorted(perm[n_val:])]
    return train, val


def _evaluate(model: TcnModel, x: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    probs = predict_proba(model, x)
    idx = y - 1
    loss = float(-np.mean(np.log(np.maximum(probs[np.arange(len(y)), idx], PROB_CLAMP))))
    acc = float(np.mean(np.argmax(probs, axis=1) == idx))
    return loss, acc


def train(dataset: list[SessionWindows], cfg: TrainConfig = TrainConfig(),
          arch: TcnConfig = TcnConfig(), window: WindowConfig = WindowConfig(),
          pre: PreprocessConfig = PreprocessConfig()) -> tuple[TcnModel, TrainHistory]:
    train_set, val_set = split_sessions(dataset, cfg.validation_fraction, cfg.seed)
    x_tr = np.concatenate([s.x for s in train_set])
    y_tr = np.concatenate([s.y for s in train_set])
    x_va = np.concatenate([s.x for s in val_set])
    y_va = np.concatenate([s.y for s in val_set])
    if len(x_tr) == 0:
        raise InsufficientData("training split has no windows")
    if len(x_va) == 0:
        raise InsufficientData("validation split has no windows")

    missing = sorted(set(range(1, arch.num_classes + 1)) - set(int(v) for v in np.unique(y_tr)))
    if missing:
        raise MissingClass(f"class code(s) {missing} absent from the training split")

    shuffle_rng, dropout_rng = (np.random.default_rng(s)
                                for s in np.random.SeedSequence(cfg.seed).spawn(2))
    model = TcnModel(arch, init_weights(arch, cfg.seed), fit_normalizer(x_tr), window, pre)
    history = TrainHistory(train_sessions=[s.session_id for s in train_set],
                           val_sessions=[s.session_id for s in val_set])
    logger.info("Tränar på %d fönster (%d sessioner), validerar på %d fönster (%d sessioner)",
                len(x_tr), len(train_set), len(x_va), len(val_set))

    optimizer = _Adam(cfg, model.weights)
    best_loss = float("inf")
    best_weights = model.weights.copy()
    wait = 0

    for epoch in range(1, cfg.max_epochs + 1):
        order = shuffle_rng.permutation(len(x_tr))
        total_loss = 0.0
        correct = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss, grads, probs = loss_and_grad(model, x_tr[idx], y_tr[idx], dropout_rng)
            optimizer.step(model.weights, grads)
            total_loss += loss * len(idx)
            correct += int(np.sum(np.argmax(probs, axis=1) == y_tr[idx] - 1))

        val_loss, val_acc = _evaluate(model, x_va, y_va)
        record = EpochRecord(epoch, total_loss / len(x_tr), correct / len(x_tr), val_loss, val_acc)
        history.epochs.append(record)
        logger.info("epok %3d  train %.4f (%.3f)  val %.4f (%.3f)", epoch,
                    record.train_loss, record.train_acc, val_loss, val_acc)

        if val_loss < best_loss:
            best_loss = val_loss
            best_weights = model.weights.copy()
            history.best_epoch = epoch
            wait = 0
        else:
            wait += 1
            if wait >= cfg.patience:
                logger.info("Tidigt stopp efter epok %d (bäst: %d)", epoch, history.best_epoch)
                break

    model.weights = best_weights
    model.metadata = {
        "arch": "tcn",
        "seed": cfg.seed,
        "epochs_run": len(history.epochs),
        "best_epoch": history.best_epoch,
        "final_val_loss": best_loss if history.epochs else None,
        "train_sessions": history.train_sessions,
        "val_sessions": history.val_sessions,
    }
    return model, history


# ---------------------------------------------------------------------------
# Per-session prediction
# ---------------------------------------------------------------------------

@dataclass
class SessionPrediction:
    t_us: np.ndarray        # (T,)
    probs: np.ndarray       # (T, 5), NaN rows during warm-up
    phases: np.ndarray      # (T,) phase codes; Stance during warm-up
    warmup: np.ndarray      # (T,) bool

    def phase_list(self) -> list[GaitPhase]:
        return [GaitPhase(int(c)) for c in self.phases]


def predict_session(model: TcnModel, session: SessionRecording) -> SessionPrediction:
    h = model.window.h
    T = len(session.samples)
    if T < h:
        raise SessionTooShort(f"session has {T} frames, window needs {h}")

    vectors = preprocess_session(session, model.preprocess, model.window.sample_rate_hz)
    probs = np.full((T, NUM_PHASES), np.nan)
    phases = np.full(T, int(GaitPhase.STANCE), dtype=np.int64)
    for t in range(h - 1, T):
        p = classify_window(model, vectors[t - h + 1:t + 1])
        probs[t] = p
        phases[t] = int(np.argmax(p)) + 1
    warmup = np.arange(T) < h - 1
    return SessionPrediction(session.timestamps, probs, phases, warmup)


PREDICTION_COLUMNS = ["t_us", "p1", "p2", "p3", "p4", "p5", "raw", "refined", "warmup"]


def format_prediction_row(t_us: int, probs, raw: int, refined, warmup: bool) -> list[str]:
    """probs is None during warm-up; refined is None when no decoder ran."""
    p = ["" for _ in range(NUM_PHASES)] if probs is None else [repr(float(v)) for v in probs]
    return [str(int(t_us)), *p, str(int(raw)), "" if refined is None else str(int(refined)),
            "1" if warmup else "0"]


def write_prediction_csv(pred: SessionPrediction, path: Path, refined=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(",".join(PREDICTION_COLUMNS) + "\n")
        for i in range(len(pred.t_us)):
            probs = None if pred.warmup[i] else pred.probs[i]
            r = None if refined is None else refined[i]
            f.write(",".join(format_prediction_row(pred.t_us[i], probs, pred.phases[i], r,
                                                   bool(pred.warmup[i]))) + "\n")


# ---------------------------------------------------------------------------
# Model file
# ---------------------------------------------------------------------------

_PREFIX = struct.Struct("<IQ")


def _payload_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


def model_to_bytes(model: TcnModel) -> bytes:
    table = []
    chunks = []
    offset = 0
    for name, shape in param_shapes(model.arch):
        arr = np.ascontiguousarray(model.weights[name], dtype="<f8")
        if arr.shape != shape:
            raise ShapeError(f"{name} has shape {arr.shape}, expected {shape}")
        raw = arr.tobytes()
        table.append({"name": name, "shape": list(shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)

    header = {
        "arch": "tcn",
        "tcn": {**model.arch.__dict__, "dilations": list(model.arch.dilations)},
        "window": dict(model.window.__dict__),
        "preprocess": dict(model.preprocess.__dict__),
        "norm": model.norm.to_dict(),
        "metadata": model.metadata,
        "arrays": table,
        "payload_sha256": _payload_hash(payload),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return config.MODEL_MAGIC + _PREFIX.pack(config.MODEL_FORMAT_VERSION, len(blob)) + blob + payload


def model_from_bytes(data: bytes) -> TcnModel:
    magic = config.MODEL_MAGIC
    if len(data) < len(magic) + _PREFIX.size or not data.startswith(magic):
        raise CorruptFile("not a model file (bad magic or truncated header)")
    version, header_len = _PREFIX.unpack_from(data, len(magic))
    if version != config.MODEL_FORMAT_VERSION:
        raise VersionMismatch(f"model format version {version}, "
                              f"expected {config.MODEL_FORMAT_VERSION}")
    start = len(magic) + _PREFIX.size
    if len(data) < start + header_len:
        raise CorruptFile("truncated header")
    try:
        header = json.loads(data[start:start + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CorruptFile(f"unreadable header: {e}") from e

    payload = data[start + header_len:]
    try:
        if header["arch"] != "tcn":
            raise CorruptFile(f"unsupported architecture '{header['arch']}'")
        if _payload_hash(payload) != header["payload_sha256"]:
            raise CorruptFile("payload checksum mismatch (truncated or modified file)")
        arch = TcnConfig(**header["tcn"])
        expected = param_shapes(arch)
        table = header["arrays"]
        if [t["name"] for t in table] != [n for n, _ in expected]:
            raise CorruptFile("array table does not match the architecture")
        arrays = {}
        for entry, (name, shape) in zip(table, expected):
            if tuple(entry["shape"]) != shape or entry["nbytes"] != 8 * int(np.prod(shape)):
                raise CorruptFile(f"bad shape for {name}")
            raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
            if len(raw) != entry["nbytes"]:
                raise CorruptFile(f"truncated array {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(shape)
        return TcnModel(arch, TcnWeights(arrays), NormStats.from_dict(header["norm"]),
                        WindowConfig(**header["window"]),
                        PreprocessConfig(**header["preprocess"]), header["metadata"])
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, CorruptFile):
            raise
        raise CorruptFile(f"malformed header: {e}") from e


def save_model(model: TcnModel, path: Path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(model_to_bytes(model))


def load_model(path: Path) -> TcnModel:
    try:
        with open(path, "rb") as f:
            data = f.read()
    except OSError as e:
        raise IoError(f"cannot read model {path}: {e}") from e
    return model_from_bytes(data)


@register_classifier("tcn", "Kausal dilaterad TCN, två residualblock")
class TcnClassifier:
    config_cls = TcnConfig
    train = staticmethod(train)
    load = staticmethod(load_model)
    save = staticmethod(save_model)
    predict_session = staticmethod(predict_session)
    param_count = staticmethod(param_count)
