"""File formats and datasets.

Tensor files are binary and bit-exact:

    magic  b"BTAT"
    u16    format version (= 1), little-endian
    u8     dtype code (1 = float32, 2 = float64)
    u8     rank
    u64*r  dimension sizes, little-endian
    ...    payload, row-major little-endian floats

Manifests are JSON and human-readable; they point at tensor files holding the
precomputed appearance / motion / embedding features and carry the token
lists, dependency edges, and answers inline. Checkpoints pack every model
parameter (and optionally optimizer state) into one file using the same
tensor layout after a JSON header. All writes go through a temp file and an
atomic rename.
"""

from __future__ import annotations

import io
import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .decoders import AnswerSpace, TASKS
from .tensor import Tensor

MAGIC = b"BTAT"
CHECKPOINT_MAGIC = b"BTCK"
FORMAT_VERSION = 1
_DTYPE_TO_CODE = {np.dtype(np.float32): 1, np.dtype(np.float64): 2}
_CODE_TO_DTYPE = {1: np.dtype("<f4"), 2: np.dtype("<f8")}


class TensorFileError(Exception):
    pass


class BadMagicError(TensorFileError):
    pass


class VersionMismatchError(TensorFileError):
    pass


class TruncatedPayloadError(TensorFileError):
    pass


class ManifestError(Exception):
    pass


class CheckpointError(Exception):
    pass


# ---------------------------------------------------------------------------
# tensor files


def _write_tensor_stream(stream, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_TO_CODE.get(arr.dtype)
    if code is None:
        raise TensorFileError(f"unsupported dtype {arr.dtype}")
    stream.write(MAGIC)
    stream.write(struct.pack("<HBB", FORMAT_VERSION, code, arr.ndim))
    for dim in arr.shape:
        stream.write(struct.pack("<Q", dim))
    stream.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def _read_exact(stream, n: int, what: str) -> bytes:
    buf = stream.read(n)
    if len(buf) != n:
        raise TruncatedPayloadError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def _read_tensor_stream(stream) -> np.ndarray:
    magic = _read_exact(stream, 4, "magic")
    if magic != MAGIC:
        raise BadMagicError(f"bad magic {magic!r}, expected {MAGIC!r}")
    version, code, rank = struct.unpack("<HBB", _read_exact(stream, 4, "header"))
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"format version {version}, expected {FORMAT_VERSION}")
    if code not in _CODE_TO_DTYPE:
        raise TensorFileError(f"unknown dtype code {code}")
    dims = [struct.unpack("<Q", _read_exact(stream, 8, "dims"))[0] for _ in range(rank)]
    dtype = _CODE_TO_DTYPE[code]
    count = int(np.prod(dims, dtype=np.int64)) if dims else 1
    payload = _read_exact(stream, count * dtype.itemsize, "payload")
    arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
    return np.ascontiguousarray(arr).astype(dtype.newbyteorder("="), copy=False)


def _atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        with open(tmp, "wb") as f:
            f.write(data)
        os.replace(tmp, path)
    except BaseException:
        if tmp.exists():
            tmp.unlink()
        raise


def write_tensor_file(t, path) -> None:
    """Write a Tensor or ndarray; atomic, bit-exact round trip."""
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    buf = io.BytesIO()
    _write_tensor_stream(buf, arr)
    _atomic_write_bytes(path, buf.getvalue())


def read_tensor_file(path) -> Tensor:
    with open(path, "rb") as f:
        return Tensor(_read_tensor_stream(f))


# ---------------------------------------------------------------------------
# datasets


@dataclass
class Candidate:
    tokens: list[str]
    embeddings: np.ndarray          # K_c x embed_dim
    edges: list[tuple[int, int, str]]


@dataclass
class QASample:
    sample_id: str
    appearance: np.ndarray          # L x feature_dim
    motion: np.ndarray              # N x feature_dim
    tokens: list[str]
    embeddings: np.ndarray          # K x embed_dim
    edges: list[tuple[int, int, str]]
    answer: int
    candidates: list[Candidate] = field(default_factory=list)

    @property
    def num_tokens(self) -> int:
        return len(self.tokens)


@dataclass
class Dataset:
    name: str
    task: str
    num_clips: int
    frames_per_clip: int
    feature_dim: int
    embed_dim: int
    answer_space: AnswerSpace
    samples: list[QASample]

    @property
    def num_frames(self) -> int:
        return self.num_clips * self.frames_per_clip

    def by_id(self, sample_id: str) -> QASample:
        for s in self.samples:
            if s.sample_id == sample_id:
                return s
        raise ManifestError(f"unknown sample id {sample_id!r}")


def _check_edges(edges, num_tokens: int, where: str) -> list[tuple[int, int, str]]:
    out = []
    for e in edges:
        if len(e) != 3:
            raise ManifestError(f"{where}: malformed dependency edge {e!r}")
        head, dep, rel = int(e[0]), int(e[1]), str(e[2])
        for idx in (head, dep):
            if not (0 <= idx < num_tokens):
                raise ManifestError(
                    f"{where}: dependency edge ({head}, {dep}) names token {idx} "
                    f"but there are only {num_tokens} tokens")
        if head == dep:
            raise ManifestError(f"{where}: self-edge on token {head}")
        out.append((head, dep, rel))
    return out


def _load_tensor_checked(base: Path, rel: str, shape: tuple, where: str) -> np.ndarray:
    path = base / rel
    if not path.is_file():
        raise ManifestError(f"{where}: missing tensor file {path}")
    try:
        arr = read_tensor_file(path).data
    except TensorFileError as exc:
        raise ManifestError(f"{where}: unreadable tensor file {path}: {exc}") from exc
    if arr.shape != shape:
        raise ManifestError(f"{where}: {path} has shape {arr.shape}, expected {shape}")
    return arr


def _answer_space_from_json(task: str, raw: dict) -> AnswerSpace:
    if task == "open_ended":
        return AnswerSpace(kind=task, labels=list(raw["labels"]))
    if task == "count":
        return AnswerSpace(kind=task, count_min=int(raw["count_min"]),
                           count_max=int(raw["count_max"]))
    return AnswerSpace(kind=task, num_candidates=int(raw["num_candidates"]))


def load_manifest(path) -> Dataset:
    """Parse and eagerly validate a dataset manifest; errors name the sample."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    try:
        task = raw["task"]
        if task not in TASKS:
            raise ManifestError(f"unknown task {task!r}")
        space = _answer_space_from_json(task, raw["answer_space"])
        num_clips = int(raw["num_clips"])
        frames_per_clip = int(raw["frames_per_clip"])
        feature_dim = int(raw["feature_dim"])
        embed_dim = int(raw["embed_dim"])
        entries = raw["samples"]
    except (KeyError, ValueError, TypeError) as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}") from exc
    if num_clips < 1 or frames_per_clip < 1:
        raise ManifestError(f"manifest {path}: clip layout must be positive")

    base = path.parent
    num_frames = num_clips * frames_per_clip
    samples = []
    seen = set()
    for entry in entries:
        sid = str(entry.get("id", "<missing id>"))
        where = f"sample {sid}"
        if sid in seen:
            raise ManifestError(f"{where}: duplicate id")
        seen.add(sid)

        tokens = [str(t) for t in entry.get("tokens", [])]
        if not tokens:
            raise ManifestError(f"{where}: empty question")
        k = len(tokens)

        appearance = _load_tensor_checked(base, entry["appearance"],
                                          (num_frames, feature_dim), where)
        motion = _load_tensor_checked(base, entry["motion"],
                                      (num_clips, feature_dim), where)
        embeddings = _load_tensor_checked(base, entry["embeddings"],
                                          (k, embed_dim), where)
        edges = _check_edges(entry.get("edges", []), k, where)

        answer = int(entry["answer"])
        candidates = []
        if task == "open_ended":
            if not (0 <= answer < space.num_labels):
                raise ManifestError(f"{where}: answer {answer} outside label vocabulary")
        elif task == "count":
            if not (space.count_min <= answer <= space.count_max):
                raise ManifestError(
                    f"{where}: count {answer} outside [{space.count_min}, {space.count_max}]")
        else:
            raw_cands = entry.get("candidates", [])
            if len(raw_cands) != space.num_candidates:
                raise ManifestError(
                    f"{where}: expected {space.num_candidates} candidates, got {len(raw_cands)}")
            if not (0 <= answer < space.num_candidates):
                raise ManifestError(f"{where}: correct-candidate index {answer} out of range")
            for j, cand in enumerate(raw_cands):
                cwhere = f"{where} candidate {j}"
                ctokens = [str(t) for t in cand.get("tokens", [])]
                if not ctokens:
                    raise ManifestError(f"{cwhere}: empty candidate")
                cemb = _load_tensor_checked(base, cand["embeddings"],
                                            (len(ctokens), embed_dim), cwhere)
                cedges = _check_edges(cand.get("edges", []), len(ctokens), cwhere)
                candidates.append(Candidate(ctokens, cemb, cedges))

        samples.append(QASample(sid, appearance, motion, tokens, embeddings,
                                edges, answer, candidates))

    return Dataset(str(raw.get("name", path.stem)), task, num_clips, frames_per_clip,
                   feature_dim, embed_dim, space, samples)


# ---------------------------------------------------------------------------
# synthetic datasets


def _random_tree_edges(rng: np.random.Generator, k: int) -> list[tuple[int, int, str]]:
    # Random attachment tree: connected, sparse, no cycles.
    return [(int(rng.integers(0, j)), j, "dep") for j in range(1, k)]


def _write_sample_tensor(out_dir: Path, name: str, arr: np.ndarray) -> str:
    rel = f"tensors/{name}.btat"
    write_tensor_file(arr.astype(np.float32), out_dir / rel)
    return rel


def count_bursts(motion: np.ndarray, burst_dir: np.ndarray, threshold: float = 1.5) -> int:
    """Independent recovery of the planted count: clips whose projection on the
    burst direction clears the threshold."""
    return int((motion @ burst_dir > threshold).sum())


def generate_synthetic_dataset(out_dir, task: str, seed: int, num_samples: int,
                               num_clips: int = 4, frames_per_clip: int = 4,
                               num_tokens: int = 6, feature_dim: int = 32,
                               embed_dim: int = 300, num_labels: int = 4,
                               num_candidates: int = 4, count_max: int = 5,
                               difficulty: float = 0.1) -> Path:
    """Write a deterministic planted-answer dataset; returns the manifest path.

    open_ended: the label indexes the prototype nearest the mean motion row.
    count:      the answer is the number of clips carrying a feature burst.
    multi_choice: the correct candidate's embeddings share a latent direction
                  with the appearance features; distractors use fresh latents.
    """
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}")
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if task == "count" and count_max > num_clips:
        raise ValueError(f"count_max {count_max} exceeds the {num_clips} clips")

    out_dir = Path(out_dir)
    (out_dir / "tensors").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    num_frames = num_clips * frames_per_clip

    # Dataset-level planted structure, drawn before any per-sample values.
    prototypes = rng.normal(size=(num_labels, feature_dim))
    prototypes /= np.linalg.norm(prototypes, axis=1, keepdims=True)
    burst_dir = rng.normal(size=feature_dim)
    burst_dir /= np.linalg.norm(burst_dir)
    latent_dim = 4
    proj_app = rng.normal(size=(latent_dim, feature_dim)) / np.sqrt(latent_dim)
    proj_emb = rng.normal(size=(latent_dim, embed_dim)) / np.sqrt(latent_dim)

    if task == "open_ended":
        answer_space = {"labels": [f"label_{i}" for i in range(num_labels)]}
    elif task == "count":
        answer_space = {"count_min": 1, "count_max": count_max}
    else:
        answer_space = {"num_candidates": num_candidates}

    entries = []
    for i in range(num_samples):
        sid = f"s{i:04d}"
        tokens = [f"w{i}_{t}" for t in range(num_tokens)]
        edges = _random_tree_edges(rng, num_tokens)
        embeddings = 0.5 * rng.normal(size=(num_tokens, embed_dim))

        candidates_json = []
        if task == "open_ended":
            answer = i % num_labels
            motion = prototypes[answer][None, :] + difficulty * rng.normal(
                size=(num_clips, feature_dim))
            appearance = 0.5 * prototypes[answer][None, :] + difficulty * rng.normal(
                size=(num_frames, feature_dim))
            recovered = int(np.argmin(
                np.linalg.norm(prototypes - motion.mean(axis=0), axis=1)))
            assert recovered == answer, "planted label not recoverable"
        elif task == "count":
            answer = 1 + i % count_max
            motion = difficulty * rng.normal(size=(num_clips, feature_dim))
            hot = rng.choice(num_clips, size=answer, replace=False)
            motion[hot] += 3.0 * burst_dir
            appearance = difficulty * rng.normal(size=(num_frames, feature_dim))
            assert count_bursts(motion, burst_dir) == answer, "planted count not recoverable"
        else:
            answer = i % num_candidates
            z = rng.normal(size=latent_dim)
            z /= np.linalg.norm(z)
            appearance = z @ proj_app + difficulty * rng.normal(
                size=(num_frames, feature_dim))
            motion = difficulty * rng.normal(size=(num_clips, feature_dim))
            cand_tokens = 3
            for j in range(num_candidates):
                if j == answer:
                    zj = z
                else:
                    zj = rng.normal(size=latent_dim)
                    zj /= np.linalg.norm(zj)
                cemb = zj @ proj_emb + difficulty * rng.normal(
                    size=(cand_tokens, embed_dim))
                ctoks = [f"c{i}_{j}_{t}" for t in range(cand_tokens)]
                cedges = _random_tree_edges(rng, cand_tokens)
                rel = _write_sample_tensor(out_dir, f"{sid}_cand{j}_emb", cemb)
                candidates_json.append(
                    {"tokens": ctoks, "embeddings": rel, "edges": [list(e) for e in cedges]})

        entry = {
            "id": sid,
            "appearance": _write_sample_tensor(out_dir, f"{sid}_app", appearance),
            "motion": _write_sample_tensor(out_dir, f"{sid}_mot", motion),
            "tokens": tokens,
            "embeddings": _write_sample_tensor(out_dir, f"{sid}_emb", embeddings),
            "edges": [list(e) for e in edges],
            "answer": answer,
        }
        if candidates_json:
            entry["candidates"] = candidates_json
        entries.append(entry)

    manifest = {
        "name": f"synth-{task}-seed{seed}",
        "task": task,
        "num_clips": num_clips,
        "frames_per_clip": frames_per_clip,
        "feature_dim": feature_dim,
        "embed_dim": embed_dim,
        "answer_space": answer_space,
        "samples": entries,
    }
    manifest_path = out_dir / "manifest.json"
    _atomic_write_bytes(manifest_path,
                        json.dumps(manifest, indent=2, sort_keys=True).encode())
    return manifest_path


# ---------------------------------------------------------------------------
# interaction trace dumps


def _axis_labels(n: int, num_frames: int, num_clips: int, tokens: list[str]) -> list[str]:
    if n == len(tokens):
        return list(tokens)
    if n == num_clips:
        return [f"clip_{i}" for i in range(n)]
    if n == num_frames:
        return [f"frame_{i}" for i in range(n)]
    return [f"node_{i}" for i in range(n)]


def dump_interaction_trace(trace, sample: QASample, num_clips: int, path) -> None:
    """Write the captured interaction matrices with per-row argmax and max.

    The row maxima identify, for every node, its strongest cross-graph link,
    which is enough to redraw best-connection diagrams externally.
    """
    num_frames = sample.appearance.shape[0]
    doc = {"sample_id": sample.sample_id, "tokens": sample.tokens, "matrices": {}}
    for name, mat in trace.matrices().items():
        doc["matrices"][name] = {
            "row_labels": _axis_labels(mat.shape[0], num_frames, num_clips, sample.tokens),
            "col_labels": _axis_labels(mat.shape[1], num_frames, num_clips, sample.tokens),
            "values": mat.tolist(),
            "row_argmax": np.argmax(mat, axis=1).tolist(),
            "row_max": np.max(mat, axis=1).tolist(),
        }
    _atomic_write_bytes(path, json.dumps(doc, indent=2, sort_keys=True).encode())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, params: dict[str, np.ndarray], model_config: dict,
                    train_config: dict | None = None,
                    adam_state: tuple[int, dict, dict] | None = None) -> None:
    """Single-file container: JSON header + tensor blobs in header order."""
    names = list(params)
    meta = {
        "version": FORMAT_VERSION,
        "model": model_config,
        "train": train_config,
        "params": names,
        "adam_step": adam_state[0] if adam_state is not None else None,
    }
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(blob)))
    buf.write(blob)
    for name in names:
        _write_tensor_stream(buf, params[name])
    if adam_state is not None:
        _, m, v = adam_state
        for name in names:
            _write_tensor_stream(buf, m[name])
            _write_tensor_stream(buf, v[name])
    _atomic_write_bytes(path, buf.getvalue())


def load_checkpoint(path):
    """Returns (model_config, train_config, params, adam_state_or_None)."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    buf = io.BytesIO(raw)
    magic = buf.read(4)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"bad checkpoint magic {magic!r}")
    header = buf.read(6)
    if len(header) != 6:
        raise CheckpointError("truncated checkpoint header")
    version, meta_len = struct.unpack("<HI", header)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint version {version}, expected {FORMAT_VERSION}")
    try:
        meta = json.loads(buf.read(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint metadata: {exc}") from exc
    try:
        params = {name: _read_tensor_stream(buf) for name in meta["params"]}
        adam_state = None
        if meta.get("adam_step") is not None:
            m, v = {}, {}
            for name in meta["params"]:
                m[name] = _read_tensor_stream(buf)
                v[name] = _read_tensor_stream(buf)
            adam_state = (int(meta["adam_step"]), m, v)
    except TensorFileError as exc:
        raise CheckpointError(f"corrupt checkpoint tensors: {exc}") from exc
    return meta["model"], meta.get("train"), params, adam_state
