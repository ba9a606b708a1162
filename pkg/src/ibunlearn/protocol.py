"""Client/server exchange: compressor checkpoints, unlearning requests and
the binary container both travel in.

Container layout (all integers little-endian)::

    b"BLDU" | version u16 | kind u8 | header length u32 | header (UTF-8)
    then per array: name length u16 | name | rank u8 | dims u32[rank] | payload

The header is a flat ``key=value\\n`` block. Payloads are 32-bit floats,
except label arrays (names starting with ``y_``) which are u32.
"""
from __future__ import annotations

import math
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .masking import STRATEGIES, DpAccount, MaskSpec, account, epsilon_delta, mask_batch
from .numerics import Mlp, ParamSet, Rng, ShapeError
from .vib import VibModel, encode_with, sample_code

MAGIC = b"BLDU"
VERSION = 1
KIND_CHECKPOINT = 1
KIND_REQUEST = 2
KIND_MODEL = 3  # full model (compressor and approximator), server side only
KINDS = (KIND_CHECKPOINT, KIND_REQUEST, KIND_MODEL)
MODES = ("mean-code", "sampled")

FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3


class ProtocolFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


# ---------------------------------------------------------------------------
# Container encoding


def _is_label(name: str) -> bool:
    return name.startswith("y_")


def _encode_array(name: str, array: np.ndarray) -> bytes:
    raw_name = name.encode("utf-8")
    array = np.asarray(array)
    if _is_label(name):
        if array.size and (array.min() < 0 or array.max() > 0xFFFFFFFF):
            raise ValueError(f"label array {name!r} does not fit u32")
        payload = array.astype("<u4").tobytes()
    else:
        payload = array.astype("<f4").tobytes()
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", array.ndim)
    head += struct.pack(f"<{array.ndim}I", *array.shape)
    return head + payload


def params_bytes(params: ParamSet) -> bytes:
    """Serialized array section of a parameter set (sorted by name)."""
    return b"".join(_encode_array(name, params[name]) for name in params)


def encode_container(kind: int, header: dict[str, str], arrays: list[tuple[str, np.ndarray]]) -> bytes:
    if kind not in KINDS:
        raise ValueError(f"unknown container kind {kind}")
    meta = {"version": str(VERSION), "kind": str(kind), **header}
    lines = []
    for key, value in meta.items():
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"header entry {key!r} cannot be encoded")
        lines.append(f"{key}={value}\n")
    text = "".join(lines).encode("utf-8")
    out = [MAGIC, struct.pack("<HBI", VERSION, kind, len(text)), text]
    out.extend(_encode_array(name, arr) for name, arr in arrays)
    return b"".join(out)


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise ProtocolFormatError(f"truncated {what}: need {n} bytes, {len(self.blob) - self.pos} left", self.pos)
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode_container(blob: bytes) -> tuple[int, dict[str, str], dict[str, np.ndarray]]:
    r = _Reader(blob)
    if r.take(4, "magic") != MAGIC:
        raise ProtocolFormatError("bad magic, expected b'BLDU'", 0)
    (version,) = r.unpack("<H", "version")
    if version != VERSION:
        raise ProtocolFormatError(f"unsupported format version {version}", 4)
    (kind,) = r.unpack("<B", "kind")
    if kind not in KINDS:
        raise ProtocolFormatError(f"unknown kind byte {kind}", 6)
    (header_len,) = r.unpack("<I", "header length")
    header_start = r.pos
    try:
        text = r.take(header_len, "header").decode("utf-8")
    except UnicodeDecodeError as exc:
        raise ProtocolFormatError("header is not valid UTF-8", header_start + exc.start) from None
    header: dict[str, str] = {}
    offset = header_start
    for line in text.splitlines(keepends=True):
        if not line.endswith("\n") or "=" not in line:
            raise ProtocolFormatError(f"malformed header line {line!r}", offset)
        key, value = line[:-1].split("=", 1)
        if key in header:
            raise ProtocolFormatError(f"duplicate header key {key!r}", offset)
        header[key] = value
        offset += len(line.encode("utf-8"))
    if header.get("version") != str(version) or header.get("kind") != str(kind):
        raise ProtocolFormatError("header version/kind disagree with the preamble", header_start)

    arrays: dict[str, np.ndarray] = {}
    while r.pos < len(blob):
        start = r.pos
        (name_len,) = r.unpack("<H", "array name length")
        try:
            name = r.take(name_len, "array name").decode("utf-8")
        except UnicodeDecodeError:
            raise ProtocolFormatError("array name is not valid UTF-8", start + 2) from None
        if name in arrays:
            raise ProtocolFormatError(f"duplicate array {name!r}", start)
        (rank,) = r.unpack("<B", "array rank")
        dims = r.unpack(f"<{rank}I", "array dims")
        count = int(np.prod(dims)) if rank else 1
        dtype = "<u4" if _is_label(name) else "<f4"
        payload = r.take(4 * count, f"payload of {name!r}")
        arr = np.frombuffer(payload, dtype=dtype).reshape(dims)
        arrays[name] = arr.astype(np.int64) if _is_label(name) else arr.astype(np.float64)
    return kind, header, arrays


def atomic_write(path, blob: bytes) -> None:
    """Write via a temporary file in the target directory and rename."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read(path, expected_kind: int) -> tuple[dict[str, str], dict[str, np.ndarray]]:
    kind, header, arrays = decode_container(Path(path).read_bytes())
    if kind != expected_kind:
        raise ProtocolFormatError(f"expected container kind {expected_kind}, found {kind}", 6)
    return header, arrays


def _field(header: dict[str, str], key: str, cast):
    if key not in header:
        raise ProtocolFormatError(f"missing header key {key!r}", 11)
    try:
        return cast(header[key])
    except ValueError:
        raise ProtocolFormatError(f"bad value for header key {key!r}: {header[key]!r}", 11) from None


def _widths(text: str) -> tuple[int, ...]:
    return tuple(int(w) for w in text.split(","))


def _widths_text(widths) -> str:
    return ",".join(str(int(w)) for w in widths)


def _rounded(params: ParamSet) -> ParamSet:
    # what the container stores: values at 32-bit precision
    return ParamSet({k: v.astype(np.float32).astype(np.float64) for k, v in params.items()})


# ---------------------------------------------------------------------------
# Compressor checkpoint


@dataclass(frozen=True)
class CompressorCheckpoint:
    widths: tuple[int, ...]  # compressor layer widths; last = 2 * latent_dim
    beta: float
    params: ParamSet = field(repr=False)
    seed: Optional[int] = None

    def __post_init__(self):
        net = self.compressor
        expected = set(net.zeros())
        if set(self.params) != expected:
            raise ValueError("checkpoint parameters must be exactly the compressor's")

    @property
    def compressor(self) -> Mlp:
        return Mlp(tuple(self.widths), "compressor")

    @property
    def latent_dim(self) -> int:
        return self.widths[-1] // 2

    @property
    def n_features(self) -> int:
        return self.widths[0]

    @property
    def hash(self) -> str:
        return f"{fnv1a64(params_bytes(self.params)):016x}"

    def encode(self, inputs):
        return encode_with(self.compressor, self.params, inputs)


def compressor_checkpoint(model: VibModel, seed: Optional[int] = None) -> CompressorCheckpoint:
    """Compressor half of ``model`` at container precision."""
    return CompressorCheckpoint(
        tuple(model.compressor.widths), model.beta, _rounded(model.params.subset("compressor.")), seed
    )


def model_hash(model: VibModel) -> str:
    """Hash of the compressor a server would hand out for ``model``."""
    return compressor_checkpoint(model).hash


def checkpoint_bytes(ckpt: CompressorCheckpoint) -> bytes:
    header = {
        "beta": repr(float(ckpt.beta)),
        "latent_dim": str(ckpt.latent_dim),
        "n_features": str(ckpt.n_features),
        "widths": _widths_text(ckpt.widths),
        "checkpoint_hash": ckpt.hash,
    }
    if ckpt.seed is not None:
        header["seed"] = str(int(ckpt.seed))
    return encode_container(KIND_CHECKPOINT, header, [(k, ckpt.params[k]) for k in ckpt.params])


def export_compressor(model: VibModel, path, seed: Optional[int] = None) -> CompressorCheckpoint:
    ckpt = compressor_checkpoint(model, seed)
    atomic_write(path, checkpoint_bytes(ckpt))
    return ckpt


def load_checkpoint(path) -> CompressorCheckpoint:
    header, arrays = _read(path, KIND_CHECKPOINT)
    widths = _field(header, "widths", _widths)
    seed = _field(header, "seed", int) if "seed" in header else None
    try:
        ckpt = CompressorCheckpoint(widths, _field(header, "beta", float), ParamSet(arrays), seed)
    except ValueError as exc:
        raise ProtocolFormatError(str(exc), 11) from None
    if _field(header, "latent_dim", int) != ckpt.latent_dim or _field(header, "n_features", int) != ckpt.n_features:
        raise ProtocolFormatError("latent_dim / n_features disagree with widths", 11)
    if header.get("checkpoint_hash") != ckpt.hash:
        raise ProtocolFormatError("stored checkpoint hash does not match the parameters", 11)
    return ckpt


# ---------------------------------------------------------------------------
# Full model (server side)


def model_bytes(model: VibModel) -> bytes:
    params = _rounded(model.params)
    header = {
        "beta": repr(float(model.beta)),
        "latent_dim": str(model.latent_dim),
        "n_features": str(model.n_features),
        "widths": _widths_text(model.compressor.widths),
        "approximator_widths": _widths_text(model.approximator.widths),
        "checkpoint_hash": model_hash(model),
    }
    return encode_container(KIND_MODEL, header, [(k, params[k]) for k in params])


def save_model(model: VibModel, path) -> None:
    atomic_write(path, model_bytes(model))


def load_model(path) -> VibModel:
    header, arrays = _read(path, KIND_MODEL)
    comp = Mlp(_field(header, "widths", _widths), "compressor")
    appr = Mlp(_field(header, "approximator_widths", _widths), "approximator")
    params = ParamSet(arrays)
    if set(params) != set(comp.zeros()) | set(appr.zeros()):
        raise ProtocolFormatError("model file parameters do not match its architecture", 11)
    for name, value in {**comp.zeros(), **appr.zeros()}.items():
        if params[name].shape != value.shape:
            raise ProtocolFormatError(f"parameter {name!r} has shape {params[name].shape}", 11)
    try:
        return VibModel(comp, appr, params, _field(header, "beta", float))
    except ValueError as exc:
        raise ProtocolFormatError(str(exc), 11) from None


# ---------------------------------------------------------------------------
# Unlearning request


@dataclass(frozen=True)
class UnlearningRequest:
    z_e: np.ndarray
    y_e: np.ndarray
    dp: DpAccount
    sr: float
    beta_used: float
    created_with: str  # checkpoint hash, 16 hex digits
    mode: str = "mean-code"

    def __post_init__(self):
        z = np.asarray(self.z_e, dtype=np.float64)
        y = np.asarray(self.y_e, dtype=np.int64)
        if z.ndim != 2 or y.shape != (z.shape[0],):
            raise ShapeError(f"request arrays have shapes {z.shape} and {y.shape}")
        object.__setattr__(self, "z_e", z)
        object.__setattr__(self, "y_e", y)

    def __len__(self) -> int:
        return self.z_e.shape[0]


def prepare_request(
    checkpoint: CompressorCheckpoint,
    x_e,
    y_e,
    spec: MaskSpec,
    rng: Rng,
    mode: str = "mean-code",
) -> UnlearningRequest:
    """Client side: mask every erased sample, compress it with the
    downloaded compressor and attach the (epsilon, delta) account."""
    x_e = np.asarray(x_e, dtype=np.float64)
    if mode not in MODES:
        raise ValueError(f"unknown compression mode {mode!r}")
    if x_e.ndim != 2 or x_e.shape[1] != spec.n:
        raise ShapeError(f"erased inputs have shape {x_e.shape}, mask spec expects {spec.n} features")
    if spec.n != checkpoint.n_features:
        raise ShapeError(f"mask spec has n={spec.n}, compressor takes {checkpoint.n_features} features")
    y_e = np.asarray(y_e, dtype=np.int64)
    if y_e.shape != (x_e.shape[0],):
        raise ShapeError(f"{y_e.shape} labels for {x_e.shape[0]} erased samples")
    masked = np.stack([m.values for m in mask_batch(x_e, spec, rng)])
    code = checkpoint.encode(masked)
    z = code.mean if mode == "mean-code" else sample_code(code, rng)[0]
    return UnlearningRequest(z, y_e, account(spec), spec.sr, checkpoint.beta, checkpoint.hash, mode)


def request_bytes(req: UnlearningRequest) -> bytes:
    header = {
        "beta": repr(float(req.beta_used)),
        "latent_dim": str(req.z_e.shape[1]),
        "n_features": str(req.dp.n),
        "k": str(req.dp.k),
        "strategy": req.dp.strategy,
        "sr": repr(float(req.sr)),
        "epsilon": repr(float(req.dp.epsilon)),
        "delta": repr(float(req.dp.delta)),
        "mode": req.mode,
        "checkpoint_hash": req.created_with,
    }
    return encode_container(KIND_REQUEST, header, [("z_e", req.z_e), ("y_e", req.y_e)])


def save_request(req: UnlearningRequest, path) -> None:
    atomic_write(path, request_bytes(req))


def load_request(path) -> UnlearningRequest:
    header, arrays = _read(path, KIND_REQUEST)
    if set(arrays) != {"z_e", "y_e"}:
        raise ProtocolFormatError(f"request must hold arrays z_e and y_e, found {sorted(arrays)}", 11)
    if arrays["z_e"].ndim != 2 or _field(header, "latent_dim", int) != arrays["z_e"].shape[1]:
        raise ProtocolFormatError("z_e width disagrees with latent_dim", 11)
    dp = DpAccount(
        _field(header, "epsilon", float),
        _field(header, "delta", float),
        _field(header, "n_features", int),
        _field(header, "k", int),
        _field(header, "strategy", str),
    )
    try:
        return UnlearningRequest(
            arrays["z_e"],
            arrays["y_e"],
            dp,
            _field(header, "sr", float),
            _field(header, "beta", float),
            _field(header, "checkpoint_hash", str),
            _field(header, "mode", str),
        )
    except ShapeError as exc:
        raise ProtocolFormatError(str(exc), 11) from None


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: str = ""

    def __bool__(self) -> bool:
        return self.accepted


def _dp_consistent(req: UnlearningRequest) -> bool:
    dp = req.dp
    if dp.strategy not in STRATEGIES or dp.n < 1 or dp.k < 1:
        return False
    try:
        if MaskSpec(dp.n, req.sr, dp.strategy).k != dp.k:
            return False
        eps, delta = epsilon_delta(dp.n, dp.k, dp.strategy)
    except ValueError:
        return False
    return math.isclose(eps, dp.epsilon, rel_tol=1e-12, abs_tol=1e-15) and math.isclose(
        delta, dp.delta, rel_tol=1e-12, abs_tol=1e-15
    )


def validate_request(
    req: UnlearningRequest, checkpoint_hash: str, latent_dim: int, n_classes: int
) -> Verdict:
    """Server-side admission check. Rejection is returned, never raised."""
    if req.created_with != checkpoint_hash:
        return Verdict(False, "checkpoint mismatch")
    if req.z_e.shape[1] != latent_dim:
        return Verdict(False, "latent dim mismatch")
    if len(req) == 0:
        return Verdict(False, "empty request")
    if req.y_e.min() < 0 or req.y_e.max() >= n_classes:
        return Verdict(False, "label out of range")
    if not np.all(np.isfinite(req.z_e)):
        return Verdict(False, "non-finite codes")
    if not _dp_consistent(req):
        return Verdict(False, "dp metadata inconsistent")
    return Verdict(True)


def validate_for_model(req: UnlearningRequest, model: VibModel) -> Verdict:
    return validate_request(req, model_hash(model), model.latent_dim, model.n_classes)
