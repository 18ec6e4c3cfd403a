"""Embedding file format, manifest parsing, batching, synthetic data.

The on-disk embedding format ("WQEB") is a fixed little-endian layout:
magic ``WQEB``, u32 version (=1), u32 rows, u32 cols, u8 dtype code
(0 = float32), then rows*cols float32 payload in row-major order. The
reader validates everything and the round trip is bit-exact for f32
payloads; arrays are upcast to f64 on load for the numeric pipeline.
"""

from __future__ import annotations

import csv
import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

WQEB_MAGIC = b"WQEB"
WQEB_VERSION = 1
DTYPE_F32 = 0

MOS_MIN, MOS_MAX = 1.0, 5.0

MANIFEST_COLUMNS = ["clip_id", "system_id", "audio_emb_path", "text_emb_path",
                    "omq_mos", "ta_mos"]


# ---------------------------------------------------------------------------
# embedding files
# ---------------------------------------------------------------------------

def write_embedding(path, matrix) -> None:
    """Write a T x D real matrix as a WQEB f32 file."""
    arr = np.asarray(matrix, dtype=np.float32)
    if arr.ndim != 2:
        raise DataError(f"embedding must be 2-D, got shape {arr.shape}")
    t, d = arr.shape
    if t < 1 or d < 1:
        raise DataError(f"embedding extents must be >= 1, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DataError(f"embedding for {path} contains NaN/Inf")
    header = WQEB_MAGIC + struct.pack("<IIIB", WQEB_VERSION, t, d, DTYPE_F32)
    payload = arr.astype("<f4", copy=False).tobytes(order="C")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_embedding(path) -> np.ndarray:
    """Read a WQEB file; returns a T x D float64 array."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 17:
        raise DataError(f"{path}: truncated header ({len(blob)} bytes)")
    if blob[:4] != WQEB_MAGIC:
        raise DataError(f"{path}: bad magic {blob[:4]!r}")
    version, t, d, dtype_code = struct.unpack("<IIIB", blob[4:17])
    if version != WQEB_VERSION:
        raise DataError(f"{path}: unsupported version {version}")
    if dtype_code != DTYPE_F32:
        raise DataError(f"{path}: unsupported dtype code {dtype_code}")
    if t < 1 or d < 1:
        raise DataError(f"{path}: extents must be >= 1, got {t}x{d}")
    expected = t * d * 4
    got = len(blob) - 17
    if got != expected:
        kind = "truncated" if got < expected else "trailing bytes in"
        raise DataError(f"{path}: {kind} payload (expected {expected} bytes, got {got})")
    arr = np.frombuffer(blob, dtype="<f4", offset=17).reshape(t, d)
    if not np.all(np.isfinite(arr)):
        raise DataError(f"{path}: payload contains NaN/Inf")
    return arr.astype(np.float64)


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

@dataclass
class ClipRecord:
    clip_id: str
    system_id: str
    audio_emb_path: str
    text_emb_path: str
    omq_mos: float
    ta_mos: float


def parse_manifest(path) -> list:
    """Parse a manifest CSV into ClipRecords, resolving relative paths."""
    base = os.path.dirname(os.path.abspath(path))
    try:
        fh = open(path, "r", encoding="utf-8", newline="")
    except OSError as e:
        raise DataError(f"cannot open manifest {path}: {e}") from e
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty manifest") from None
        if header != MANIFEST_COLUMNS:
            missing = [c for c in MANIFEST_COLUMNS if c not in header]
            raise DataError(f"{path}: bad header {header} (missing {missing})")
        records = []
        seen = set()
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_COLUMNS):
                raise DataError(f"{path}:{lineno}: expected {len(MANIFEST_COLUMNS)} fields, got {len(row)}")
            clip_id, system_id, a_path, t_path, omq_s, ta_s = row
            if clip_id in seen:
                raise DataError(f"{path}:{lineno}: duplicate clip_id {clip_id!r}")
            seen.add(clip_id)
            if not system_id:
                raise DataError(f"{path}:{lineno}: empty system_id for clip {clip_id!r}")
            try:
                omq, ta = float(omq_s), float(ta_s)
            except ValueError:
                raise DataError(f"{path}:{lineno}: unreadable MOS for clip {clip_id!r}") from None
            for label, v in (("omq_mos", omq), ("ta_mos", ta)):
                if not (MOS_MIN <= v <= MOS_MAX):
                    raise DataError(
                        f"{path}:{lineno}: {label}={v} outside [{MOS_MIN},{MOS_MAX}] for clip {clip_id!r}")
            records.append(ClipRecord(
                clip_id=clip_id,
                system_id=system_id,
                audio_emb_path=a_path if os.path.isabs(a_path) else os.path.join(base, a_path),
                text_emb_path=t_path if os.path.isabs(t_path) else os.path.join(base, t_path),
                omq_mos=omq,
                ta_mos=ta,
            ))
    return records


def write_manifest(path, rows) -> None:
    """Write manifest rows (dicts keyed by the schema columns) as CSV with LF endings."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(MANIFEST_COLUMNS) + "\n")
        for row in rows:
            fh.write(",".join(str(row[c]) for c in MANIFEST_COLUMNS) + "\n")


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    audio: np.ndarray        # B x Ta_max x Da
    audio_mask: np.ndarray   # B x Ta_max, bool
    text: np.ndarray         # B x Tt_max x Dt
    text_mask: np.ndarray    # B x Tt_max, bool
    omq_targets: np.ndarray  # B
    ta_targets: np.ndarray   # B
    clip_ids: list = field(default_factory=list)
    system_ids: list = field(default_factory=list)

    @property
    def size(self) -> int:
        return self.audio.shape[0]


def _load_pair(record, cache):
    if cache is None:
        return read_embedding(record.audio_emb_path), read_embedding(record.text_emb_path)
    for p in (record.audio_emb_path, record.text_emb_path):
        if p not in cache:
            cache[p] = read_embedding(p)
    return cache[record.audio_emb_path], cache[record.text_emb_path]


def _assemble(records, cache):
    auds, txts = [], []
    for r in records:
        a, t = _load_pair(r, cache)
        auds.append(a)
        txts.append(t)
    da = auds[0].shape[1]
    dt = txts[0].shape[1]
    for r, a, t in zip(records, auds, txts):
        if a.shape[1] != da:
            raise DataError(f"clip {r.clip_id!r}: audio dim {a.shape[1]} != {da}")
        if t.shape[1] != dt:
            raise DataError(f"clip {r.clip_id!r}: text dim {t.shape[1]} != {dt}")
    ta_max = max(a.shape[0] for a in auds)
    tt_max = max(t.shape[0] for t in txts)
    n = len(records)
    audio = np.zeros((n, ta_max, da))
    amask = np.zeros((n, ta_max), dtype=bool)
    text = np.zeros((n, tt_max, dt))
    tmask = np.zeros((n, tt_max), dtype=bool)
    for i, (a, t) in enumerate(zip(auds, txts)):
        audio[i, :a.shape[0]] = a
        amask[i, :a.shape[0]] = True
        text[i, :t.shape[0]] = t
        tmask[i, :t.shape[0]] = True
    return Batch(
        audio=audio, audio_mask=amask, text=text, text_mask=tmask,
        omq_targets=np.array([r.omq_mos for r in records]),
        ta_targets=np.array([r.ta_mos for r in records]),
        clip_ids=[r.clip_id for r in records],
        system_ids=[r.system_id for r in records],
    )


def make_batches(records, batch_size: int, seed: int = 0, shuffle: bool = False,
                 cache=None) -> list:
    """Partition records into padded batches; the short final batch is kept.

    Order is the manifest order, or a permutation fully determined by
    ``seed`` when ``shuffle`` is set. ``cache`` (path -> array) avoids
    rereading embedding files across epochs.
    """
    if not records:
        raise DataError("no records to batch")
    if batch_size < 1:
        raise DataError(f"batch_size must be >= 1, got {batch_size}")
    order = np.arange(len(records))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(records))
    batches = []
    for lo in range(0, len(records), batch_size):
        chunk = [records[i] for i in order[lo:lo + batch_size]]
        batches.append(_assemble(chunk, cache))
    return batches


# ---------------------------------------------------------------------------
# synthetic data with planted, recoverable score functions
# ---------------------------------------------------------------------------

def _blocked_grid(lo, hi, sys_of, n_systems, rng):
    """Assign a linspace(lo, hi) grid to clips in system-contiguous blocks.

    System j gets the j-th contiguous value block (permuted within the
    block), so global extremes are hit exactly while per-system means
    stay separated and within-system order stays random.
    """
    n = len(sys_of)
    grid = np.linspace(lo, hi, n) if n > 1 else np.array([(lo + hi) / 2.0])
    out = np.empty(n)
    pos = 0
    for j in range(n_systems):
        idx = np.flatnonzero(sys_of == j)
        block = grid[pos:pos + len(idx)]
        out[idx] = block[rng.permutation(len(idx))]
        pos += len(idx)
    return out


def generate_synthetic(n_clips: int, n_systems: int, d_audio: int, d_text: int,
                       seed: int, out_dir) -> str:
    """Generate an embedding tree + manifest with recoverable planted labels.

    Audio quality is planted along a fixed unit direction ``u``:
    ``omq = clamp(3 + 2*tanh(<u, mean audio>))``. Text alignment decays
    with the distance between pooled audio and pooled text (compared on
    their shared leading dimensions): ``ta = clamp(5 - beta*dist)`` with
    ``beta`` set from the realized max distance so labels span at least
    [1.5, 4.5]. Systems get distinct latent blocks so system-level
    rankings are meaningful. Everything is a pure function of ``seed``.
    """
    if n_clips < n_systems or n_systems < 1:
        raise DataError(f"need n_clips >= n_systems >= 1, got {n_clips}/{n_systems}")
    emb_dir = os.path.join(out_dir, "emb")
    try:
        os.makedirs(emb_dir, exist_ok=True)
    except OSError as e:
        raise DataError(f"cannot create output dir {out_dir}: {e}") from e

    rng = np.random.default_rng(seed)
    u = rng.normal(size=d_audio)
    u /= np.linalg.norm(u)
    k = min(d_audio, d_text)
    audio_noise = 0.2
    # keep pooled-text noise small in norm so the smallest planted
    # distances are not washed out in high dimensions
    text_noise = 0.3 / np.sqrt(k)

    sys_of = np.arange(n_clips) % n_systems
    quality = _blocked_grid(-1.35, 1.35, sys_of, n_systems, rng)
    radius = _blocked_grid(0.3, 4.0, sys_of, n_systems, rng)

    rows = []
    dists = np.empty(n_clips)
    omq_pre = np.empty(n_clips)
    t_lens = rng.integers(4, 13, size=n_clips)
    a_lens = rng.integers(20, 51, size=n_clips)
    for i in range(n_clips):
        ta_len, tt_len = int(a_lens[i]), int(t_lens[i])
        audio = quality[i] * u + audio_noise * rng.normal(size=(ta_len, d_audio))
        mean_a = audio.mean(axis=0)
        direction = rng.normal(size=k)
        direction /= np.linalg.norm(direction)
        target_t = np.zeros(d_text)
        target_t[:k] = mean_a[:k] + radius[i] * direction
        if d_text > k:
            target_t[k:] = 0.5 * rng.normal(size=d_text - k)
        text = target_t + text_noise * rng.normal(size=(tt_len, d_text))
        mean_t = text.mean(axis=0)
        dists[i] = np.linalg.norm(mean_a[:k] - mean_t[:k])
        omq_pre[i] = 3.0 + 2.0 * np.tanh(float(u @ mean_a))

        clip_id = f"clip_{i:04d}"
        write_embedding(os.path.join(emb_dir, f"{clip_id}.a.wqeb"), audio)
        write_embedding(os.path.join(emb_dir, f"{clip_id}.t.wqeb"), text)
        rows.append({
            "clip_id": clip_id,
            "system_id": f"sys_{sys_of[i]:02d}",
            "audio_emb_path": f"emb/{clip_id}.a.wqeb",
            "text_emb_path": f"emb/{clip_id}.t.wqeb",
        })

    beta = 3.5 / float(dists.max())
    omq = np.clip(omq_pre, MOS_MIN, MOS_MAX)
    ta = np.clip(5.0 - beta * dists, MOS_MIN, MOS_MAX)
    for i, row in enumerate(rows):
        row["omq_mos"] = f"{omq[i]:.6f}"
        row["ta_mos"] = f"{ta[i]:.6f}"

    manifest_path = os.path.join(out_dir, "manifest.csv")
    write_manifest(manifest_path, rows)
    planting = {
        "u": [float(v) for v in u],
        "beta": beta,
        "shared_dims": k,
        "audio_noise": audio_noise,
        "text_noise": text_noise,
        "seed": seed,
    }
    with open(os.path.join(out_dir, "planting.json"), "w", encoding="utf-8") as fh:
        json.dump(planting, fh, sort_keys=True, indent=1)
        fh.write("\n")
    return manifest_path
