"""Dual-head MOS architecture: text projection, sequence co-attention,
masked pooling, and two MLP regression heads.

Overall musical quality is read from pooled raw audio features in every
attention mode; textual alignment is read from the concatenation of the
two pooled (attended) sequences. Sequences are processed per item on
their valid rows only, so padded positions never enter any arithmetic
and padding invariance holds bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, asdict, fields

import numpy as np

from . import autodiff as ad
from .errors import ConfigError, DataError, NumericError

ATTENTION_MODES = ("seq_coattention", "vanilla_coattention", "cross_attention", "mlp_only")

MLP_HIDDEN = (256, 64)

CHECKPOINT_MAGIC = b"WQCK"
CHECKPOINT_VERSION = 1


@dataclass
class WhisqConfig:
    """Model + training hyperparameters with tuned defaults."""

    d_feat: int = 512
    d_text_in: int = 1024
    d_audio_in: int = 512          # must equal d_feat: audio is never projected
    n_heads: int = 4
    attention_mode: str = "seq_coattention"
    huber_delta: float = 1.0
    ot_weight: float = 4.057e-5    # lambda on the transport term
    ot_blur: float = 0.05
    ot_p: int = 2
    ot_max_iters: int = 200
    ot_tol: float = 1e-6
    ot_anneal: float = 0.8      # per-step epsilon factor of the warm start; 0 disables
    lr: float = 7.307e-4
    momentum: float = 0.7435
    batch_size: int = 128
    epochs: int = 148
    clip_norm: float = 1.0
    seed: int = 0

    def validate(self) -> "WhisqConfig":
        if self.attention_mode not in ATTENTION_MODES:
            raise ConfigError(f"unknown attention_mode {self.attention_mode!r}")
        if self.d_feat < 1 or self.d_feat % self.n_heads != 0:
            raise ConfigError(f"d_feat={self.d_feat} must be a positive multiple of n_heads={self.n_heads}")
        if self.d_audio_in != self.d_feat:
            raise ConfigError(f"d_audio_in={self.d_audio_in} must equal d_feat={self.d_feat}")
        if self.d_text_in < 1:
            raise ConfigError("d_text_in must be >= 1")
        if self.ot_weight < 0:
            raise ConfigError("ot_weight must be >= 0")
        if self.ot_blur <= 0:
            raise ConfigError("ot_blur must be > 0")
        if self.ot_p != 2:
            raise ConfigError("only ot_p=2 is supported")
        if self.huber_delta <= 0:
            raise ConfigError("huber_delta must be > 0")
        if self.ot_max_iters < 1 or self.ot_tol < 0:
            raise ConfigError("bad sinkhorn iteration controls")
        if not (0.0 <= self.ot_anneal < 1.0):
            raise ConfigError("ot_anneal must lie in [0, 1): an epsilon factor, 0 disables")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("batch_size must be >= 1 and epochs >= 0")
        if self.clip_norm <= 0:
            raise ConfigError("clip_norm must be > 0")
        return self

    @classmethod
    def from_dict(cls, d: dict) -> "WhisqConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        return cls(**d).validate()

    def to_dict(self) -> dict:
        return asdict(self)


def _attention_directions(mode: str):
    # audio-query direction realizes audio attending text keys;
    # text-query direction the reverse
    if mode == "seq_coattention":
        return ("att_audio", "att_text")
    if mode == "cross_attention":
        return ("att_text",)
    return ()


def param_shapes(config: WhisqConfig) -> dict:
    """Name -> shape for every trainable tensor of the given mode."""
    d, dt = config.d_feat, config.d_text_in
    shapes = {"proj.w": (dt, d), "proj.b": (d,)}
    for direction in _attention_directions(config.attention_mode):
        for m in ("q", "k", "v", "o"):
            shapes[f"{direction}.{m}.w"] = (d, d)
            shapes[f"{direction}.{m}.b"] = (d,)
    for head, d_in in (("mlp_omq", d), ("mlp_ta", 2 * d)):
        dims = (d_in,) + MLP_HIDDEN + (1,)
        for li in range(len(dims) - 1):
            shapes[f"{head}.l{li}.w"] = (dims[li], dims[li + 1])
            shapes[f"{head}.l{li}.b"] = (dims[li + 1],)
    return shapes


@dataclass
class ModelParams:
    """All trainable weights, keyed by name, as f64 arrays."""

    tensors: dict = field(default_factory=dict)

    def total_size(self) -> int:
        return sum(int(v.size) for v in self.tensors.values())

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.tensors.items()})


def init_params(config: WhisqConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights, zero biases, fully determined by ``seed``."""
    config.validate()
    rng = np.random.default_rng(seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".b"):
            tensors[name] = np.zeros(shape)
        else:
            fan_in, fan_out = shape
            bound = np.sqrt(6.0 / (fan_in + fan_out))
            tensors[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(tensors)


def count_trainable_params(config: WhisqConfig) -> int:
    """Closed-form scalar count for the given attention mode."""
    d, dt = config.d_feat, config.d_text_in
    proj = dt * d + d
    h1, h2 = MLP_HIDDEN
    mlp_omq = d * h1 + h1 + h1 * h2 + h2 + h2 * 1 + 1
    mlp_ta = 2 * d * h1 + h1 + h1 * h2 + h2 + h2 * 1 + 1
    n_dirs = len(_attention_directions(config.attention_mode))
    mha = n_dirs * 4 * (d * d + d)
    return proj + mlp_omq + mlp_ta + mha


def _tensors_of(params):
    return params.tensors if isinstance(params, ModelParams) else params


# ---------------------------------------------------------------------------
# building blocks (all generic over Tensor / ndarray inputs)
# ---------------------------------------------------------------------------

def _affine(x, p, prefix):
    return x @ p[f"{prefix}.w"] + p[f"{prefix}.b"]


def _mha_single(q_in, kv_in, p, direction, n_heads):
    """Multi-head attention for one item: queries Tq x d, keys Tk x d."""
    tq = q_in.shape[0]
    tk = kv_in.shape[0]
    d = p[f"{direction}.q.w"].shape[0]
    dh = d // n_heads
    q = _affine(q_in, p, f"{direction}.q").reshape((tq, n_heads, dh)).transpose((1, 0, 2))
    k = _affine(kv_in, p, f"{direction}.k").reshape((tk, n_heads, dh)).transpose((1, 0, 2))
    v = _affine(kv_in, p, f"{direction}.v").reshape((tk, n_heads, dh)).transpose((1, 0, 2))
    scores = (q @ k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh))
    attn = ad.softmax(scores, axis=-1)
    ctx = (attn @ v).transpose((1, 0, 2)).reshape((tq, d))
    return _affine(ctx, p, f"{direction}.o")


def _vanilla_single(h_a, h_t, d_feat):
    """Projection-free joint affinity: each side attends the other."""
    affinity = (h_a @ h_t.swapaxes(-1, -2)) * (1.0 / np.sqrt(d_feat))
    att_a = ad.softmax(affinity, axis=-1) @ h_t
    att_t = ad.softmax(affinity.swapaxes(-1, -2), axis=-1) @ h_a
    return att_a, att_t


def _pool_single(h):
    return h.mean(axis=0)


def _valid_rows(seq, mask_row):
    keep = np.asarray(mask_row, dtype=bool)
    if not keep.any():
        raise DataError("sequence with no valid positions")
    if keep.all():
        return seq
    return seq[keep]


def project_text(raw_text, params, mask=None):
    """Affine projection applied per position; padded positions stay zero.

    Accepts B x T x d_text_in (mask B x T) or a single T x d_text_in
    matrix.
    """
    p = _tensors_of(params)
    out = _affine(raw_text, p, "proj")
    if mask is not None:
        out = out * np.expand_dims(np.asarray(mask, dtype=np.float64), -1)
    return out


def pool_mean(h, mask):
    """Masked arithmetic mean over time, computed on valid rows only."""
    hd = h.data if isinstance(h, ad.Tensor) else np.asarray(h)
    if hd.ndim == 2:
        return _pool_single(_valid_rows(h, mask))
    pooled = [_pool_single(_valid_rows(h[i], mask[i])) for i in range(hd.shape[0])]
    return ad.stack(pooled)


def mlp_head(x, params, head):
    """ReLU MLP with a linear scalar output, applied to B x d_in."""
    p = _tensors_of(params)
    h = ad.relu(_affine(x, p, f"{head}.l0"))
    h = ad.relu(_affine(h, p, f"{head}.l1"))
    out = _affine(h, p, f"{head}.l2")
    return out.reshape((x.shape[0],))


def co_attention(h_a, h_t, audio_mask, text_mask, params, mode, n_heads):
    """Batched co-attention over valid rows; returns per-item attended lists.

    ``h_a``/``h_t`` are B x T x d (padded); outputs are lists of
    T_valid x d items because each item keeps its own true length.
    """
    if mode not in ("seq_coattention", "vanilla_coattention", "cross_attention"):
        raise ConfigError(f"co_attention does not run in mode {mode!r}")
    p = _tensors_of(params)
    b = h_a.shape[0] if isinstance(h_a, np.ndarray) else h_a.data.shape[0]
    att_a_items, att_t_items = [], []
    for i in range(b):
        a_i = _valid_rows(h_a[i], audio_mask[i])
        t_i = _valid_rows(h_t[i], text_mask[i])
        a_att, t_att = _attend_single(a_i, t_i, p, mode, n_heads)
        att_a_items.append(a_att)
        att_t_items.append(t_att)
    return att_a_items, att_t_items


def _attend_single(a_i, t_i, p, mode, n_heads):
    if mode == "seq_coattention":
        return (_mha_single(a_i, t_i, p, "att_audio", n_heads),
                _mha_single(t_i, a_i, p, "att_text", n_heads))
    if mode == "vanilla_coattention":
        d_feat = a_i.shape[-1]
        return _vanilla_single(a_i, t_i, d_feat)
    if mode == "cross_attention":
        return a_i, _mha_single(t_i, a_i, p, "att_text", n_heads)
    raise ConfigError(f"unknown attention mode {mode!r}")


@dataclass
class ForwardResult:
    y_omq: object            # B scores (Tensor or ndarray)
    y_ta: object             # B scores
    h_a_items: list          # per-item raw audio sequences (valid rows)
    h_t_items: list          # per-item projected text sequences (valid rows)
    omq_pool: np.ndarray     # B x d pooled raw audio (constant w.r.t. params)
    e_seq: object            # B x 2d fused representation


def forward(batch, params, config: WhisqConfig) -> ForwardResult:
    """Run the full scoring graph for one batch.

    ``params`` may hold Tensors (training) or ndarrays (inference /
    finite differences); the graph type follows the inputs.
    """
    p = _tensors_of(params)
    mode = config.attention_mode
    if batch.audio.shape[2] != config.d_feat:
        raise DataError(f"audio dim {batch.audio.shape[2]} != d_feat {config.d_feat}")
    if batch.text.shape[2] != config.d_text_in:
        raise DataError(f"text dim {batch.text.shape[2]} != d_text_in {config.d_text_in}")

    b = batch.size
    h_a_items = [_valid_rows(batch.audio[i], batch.audio_mask[i]) for i in range(b)]
    h_t_items = [project_text(raw, p) for raw in
                 (_valid_rows(batch.text[i], batch.text_mask[i]) for i in range(b))]

    # quality head reads pre-attention audio only, in every mode
    omq_pool = np.stack([a.mean(axis=0) for a in h_a_items])
    y_omq = mlp_head(omq_pool, p, "mlp_omq")

    fused = []
    for i in range(b):
        a_i, t_i = h_a_items[i], h_t_items[i]
        if mode == "mlp_only":
            att_a, att_t = a_i, t_i
        else:
            att_a, att_t = _attend_single(a_i, t_i, p, mode, config.n_heads)
        fused.append(ad.concat([_pool_single(att_a), _pool_single(att_t)], axis=-1))
    e_seq = ad.stack(fused)
    y_ta = mlp_head(e_seq, p, "mlp_ta")

    return ForwardResult(y_omq=y_omq, y_ta=y_ta, h_a_items=h_a_items,
                         h_t_items=h_t_items, omq_pool=omq_pool, e_seq=e_seq)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, params: ModelParams, config: WhisqConfig) -> None:
    """Named-section container: JSON header then f64 LE payloads."""
    sections = [{"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()]
    header = json.dumps(
        {"format_version": CHECKPOINT_VERSION, "config": config.to_dict(), "sections": sections},
        sort_keys=True, separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(header)))
        fh.write(header)
        for v in params.tensors.values():
            if not np.all(np.isfinite(v)):
                raise NumericError("refusing to checkpoint non-finite parameters")
            fh.write(v.astype("<f8", copy=False).tobytes(order="C"))


def load_checkpoint(path):
    """Read a checkpoint; returns (ModelParams, WhisqConfig)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise DataError(f"{path}: bad checkpoint magic {blob[:4]!r}")
    version, header_len = struct.unpack("<II", blob[4:12])
    if version != CHECKPOINT_VERSION:
        raise DataError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(blob[12:12 + header_len].decode("utf-8"))
    config = WhisqConfig.from_dict(header["config"])
    tensors = {}
    offset = 12 + header_len
    for sec in header["sections"]:
        shape = tuple(sec["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + count * 8
        if end > len(blob):
            raise DataError(f"{path}: truncated checkpoint payload")
        tensors[sec["name"]] = np.frombuffer(blob[offset:end], dtype="<f8").reshape(shape).copy()
        offset = end
    if offset != len(blob):
        raise DataError(f"{path}: trailing bytes in checkpoint")
    expected = param_shapes(config)
    if set(expected) != set(tensors) or any(tuple(expected[k]) != tensors[k].shape for k in expected):
        raise DataError(f"{path}: checkpoint sections do not match config architecture")
    return ModelParams(tensors), config
