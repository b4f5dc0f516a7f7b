"""Checkpoint I/O and layer alignment.

Checkpoints are stored in the safetensors container format: an 8-byte
little-endian header length, a JSON header mapping tensor names to
``{dtype, shape, data_offsets}``, then raw row-major payloads.  F32, F16
and BF16 payloads are supported; everything is decoded to float64 in
memory with the original dtype tag kept for round-tripping.
"""

from __future__ import annotations

import fnmatch
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .linalg import require_finite

DTYPES = ("f32", "f16", "bf16")

_FILE_TAG = {"f32": "F32", "f16": "F16", "bf16": "BF16"}
_MEM_TAG = {v: k for k, v in _FILE_TAG.items()}
_ITEMSIZE = {"f32": 4, "f16": 2, "bf16": 2}


class CheckpointFormatError(ValueError):
    """Malformed, truncated or unsupported checkpoint content."""


@dataclass
class TensorEntry:
    values: np.ndarray  # float64, 1-D or 2-D
    dtype: str  # one of DTYPES


class NamedTensorMap:
    """Ordered name -> tensor map; iteration is always lexicographic."""

    def __init__(self) -> None:
        self._entries: dict[str, TensorEntry] = {}

    def add(self, name: str, values: np.ndarray, dtype: str = "f32") -> None:
        if name in self._entries:
            raise CheckpointFormatError(f"duplicate tensor name '{name}'")
        if dtype not in DTYPES:
            raise CheckpointFormatError(f"unsupported dtype tag '{dtype}' for '{name}'")
        values = np.asarray(values, dtype=np.float64)
        if values.ndim not in (1, 2):
            raise CheckpointFormatError(
                f"tensor '{name}' has rank {values.ndim}; only 1-D/2-D supported"
            )
        self._entries[name] = TensorEntry(values=values, dtype=dtype)

    def names(self) -> list[str]:
        return sorted(self._entries)

    def items(self):
        for name in self.names():
            yield name, self._entries[name]

    def entry(self, name: str) -> TensorEntry:
        return self._entries[name]

    def set_values(self, name: str, values: np.ndarray) -> None:
        """Replace a tensor's values in place, keeping its dtype tag."""
        e = self._entries[name]
        values = np.asarray(values, dtype=np.float64)
        if values.shape != e.values.shape:
            raise CheckpointFormatError(
                f"shape change for '{name}': {e.values.shape} -> {values.shape}"
            )
        e.values = values

    def __getitem__(self, name: str) -> np.ndarray:
        return self._entries[name].values

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self):
        return iter(self.names())

    def copy(self) -> "NamedTensorMap":
        out = NamedTensorMap()
        for name, e in self.items():
            out.add(name, e.values.copy(), e.dtype)
        return out


def _decode_payload(raw: bytes, dtype: str, name: str, offset: int) -> np.ndarray:
    if dtype == "f32":
        return np.frombuffer(raw, dtype="<f4").astype(np.float64)
    if dtype == "f16":
        return np.frombuffer(raw, dtype="<f2").astype(np.float64)
    # bf16: the upper 16 bits of an f32
    u16 = np.frombuffer(raw, dtype="<u2").astype(np.uint32)
    return (u16 << 16).view(np.float32).astype(np.float64)


def _encode_payload(values: np.ndarray, dtype: str) -> bytes:
    if dtype == "f32":
        return values.astype("<f4").tobytes()
    if dtype == "f16":
        return values.astype("<f2").tobytes()
    # bf16 with round-to-nearest-even
    u = values.astype(np.float32).view(np.uint32)
    rounding = ((u >> 16) & 1) + np.uint32(0x7FFF)
    return ((u + rounding) >> 16).astype("<u2").tobytes()


def _parse_header(blob: bytes, path: str) -> tuple[dict, int]:
    if len(blob) < 8:
        raise CheckpointFormatError(f"{path}: truncated file (no header length)")
    (header_len,) = struct.unpack("<Q", blob[:8])
    if 8 + header_len > len(blob):
        raise CheckpointFormatError(
            f"{path}: header length {header_len} exceeds file size at byte offset 8"
        )

    def _reject_dupes(pairs):
        seen = set()
        for key, _ in pairs:
            if key in seen:
                raise CheckpointFormatError(f"{path}: duplicate tensor name '{key}'")
            seen.add(key)
        return dict(pairs)

    try:
        header = json.loads(
            blob[8 : 8 + header_len].decode("utf-8"), object_pairs_hook=_reject_dupes
        )
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: malformed JSON header: {exc}") from exc
    if not isinstance(header, dict):
        raise CheckpointFormatError(f"{path}: header is not a JSON object")
    return header, 8 + header_len


def load_checkpoint(path: str) -> NamedTensorMap:
    """Read a safetensors file into a NamedTensorMap (float64 in memory)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    header, data_start = _parse_header(blob, str(path))
    data = blob[data_start:]

    out = NamedTensorMap()
    for name in sorted(k for k in header if k != "__metadata__"):
        info = header[name]
        try:
            file_tag = info["dtype"]
            shape = tuple(int(d) for d in info["shape"])
            begin, end = (int(o) for o in info["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointFormatError(
                f"{path}: malformed header entry for tensor '{name}': {exc}"
            ) from exc
        if file_tag not in _MEM_TAG:
            raise CheckpointFormatError(
                f"{path}: unsupported dtype '{file_tag}' for tensor '{name}' "
                f"at byte offset {data_start + begin}"
            )
        dtype = _MEM_TAG[file_tag]
        n_elem = int(np.prod(shape, dtype=np.int64)) if shape else 1
        if end - begin != n_elem * _ITEMSIZE[dtype]:
            raise CheckpointFormatError(
                f"{path}: tensor '{name}' declares shape {shape} ({n_elem} x "
                f"{_ITEMSIZE[dtype]} bytes) but data_offsets span {end - begin} bytes "
                f"at byte offset {data_start + begin}"
            )
        if end > len(data):
            raise CheckpointFormatError(
                f"{path}: truncated payload for tensor '{name}' at byte offset "
                f"{data_start + begin}"
            )
        flat = _decode_payload(data[begin:end], dtype, name, begin)
        out.add(name, flat.reshape(shape), dtype)
    return out


def serialize_checkpoint(tmap: NamedTensorMap, dtype_policy: str = "preserve") -> bytes:
    """Encode a NamedTensorMap as safetensors bytes (deterministic layout)."""
    if dtype_policy not in ("preserve", "force_f32", "force_f16", "force_bf16"):
        raise ValueError(f"unknown dtype policy '{dtype_policy}'")
    header: dict[str, dict] = {}
    payloads: list[bytes] = []
    offset = 0
    for name, e in tmap.items():
        require_finite(e.values, name)
        dtype = e.dtype if dtype_policy == "preserve" else dtype_policy.removeprefix("force_")
        raw = _encode_payload(e.values.reshape(-1), dtype)
        header[name] = {
            "dtype": _FILE_TAG[dtype],
            "shape": list(e.values.shape),
            "data_offsets": [offset, offset + len(raw)],
        }
        payloads.append(raw)
        offset += len(raw)
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    return struct.pack("<Q", len(header_bytes)) + header_bytes + b"".join(payloads)


def save_checkpoint(tmap: NamedTensorMap, path: str, dtype_policy: str = "preserve") -> None:
    blob = serialize_checkpoint(tmap, dtype_policy)
    with open(path, "wb") as fh:
        fh.write(blob)


# ---------------------------------------------------------------------------
# Layer alignment


DEFAULT_INCLUDE = [
    "*.self_attn.*.weight",
    "*.attn.*.weight",
    "*.attention.*.weight",
    "*.mlp.*.weight",
]

DEFAULT_EXCLUDE = [
    "vision_tower*",
    "*.vision_tower.*",
    "*visual*",
    "mm_projector*",
    "*.mm_projector.*",
    "*projector*",
    "*embed*",
    "lm_head*",
]


class AlignmentError(ValueError):
    """Name/shape inconsistencies between the checkpoints being merged."""


@dataclass
class AlignmentSpec:
    """Which tensors are merge-eligible and how donor names map to canonical ones."""

    include: list[str] = field(default_factory=lambda: list(DEFAULT_INCLUDE))
    exclude: list[str] = field(default_factory=lambda: list(DEFAULT_EXCLUDE))
    rename: dict[str, str] = field(default_factory=dict)
    on_missing: str = "error"  # or "skip"

    def __post_init__(self) -> None:
        if self.on_missing not in ("error", "skip"):
            raise ValueError(f"on_missing must be 'error' or 'skip', got '{self.on_missing}'")

    @classmethod
    def from_json(cls, path: str) -> "AlignmentSpec":
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
        return cls(
            include=list(doc.get("include", DEFAULT_INCLUDE)),
            exclude=list(doc.get("exclude", DEFAULT_EXCLUDE)),
            rename=dict(doc.get("rename", {})),
            on_missing=doc.get("on_missing", "error"),
        )

    def to_dict(self) -> dict:
        return {
            "include": self.include,
            "exclude": self.exclude,
            "rename": self.rename,
            "on_missing": self.on_missing,
        }

    def matches(self, name: str) -> bool:
        if any(fnmatch.fnmatchcase(name, pat) for pat in self.exclude):
            return False
        return any(fnmatch.fnmatchcase(name, pat) for pat in self.include)

    def canonicalize(self, donor_name: str) -> str:
        out = donor_name
        for src, dst in self.rename.items():
            out = out.replace(src, dst)
        return out


def _classify(name: str) -> str:
    lowered = name.lower()
    if "mlp" in lowered:
        return "mlp"
    if "attn" in lowered or "attention" in lowered:
        return "attention"
    return "other"


@dataclass
class LayerTriple:
    canonical_name: str
    base: np.ndarray
    mllm: np.ndarray
    llm: list[np.ndarray]  # one per donor
    kind: str


def align_layers(
    base: NamedTensorMap,
    mllm: NamedTensorMap,
    llms: list[NamedTensorMap],
    spec: AlignmentSpec | None = None,
) -> list[LayerTriple]:
    """Match merge-eligible tensors across base, target and donor checkpoints.

    Anything not matched (excluded patterns, 1-D tensors, tensors missing
    from a source under ``on_missing='skip'``) is left for the engines to
    copy through from the target unchanged.
    """
    spec = spec or AlignmentSpec()

    donor_views: list[dict[str, np.ndarray]] = []
    for i, donor in enumerate(llms):
        view: dict[str, np.ndarray] = {}
        for name in donor.names():
            canonical = spec.canonicalize(name)
            if canonical in view:
                raise AlignmentError(
                    f"rename rules map two donor-{i} tensors onto '{canonical}'"
                )
            view[canonical] = donor[name]
        donor_views.append(view)

    triples: list[LayerTriple] = []
    for name in mllm.names():
        tensor = mllm[name]
        if tensor.ndim != 2 or not spec.matches(name):
            continue
        sources: list[np.ndarray] = []
        missing = False
        for label, lookup in [("base", base)] + [
            (f"donor {i}", donor_views[i]) for i in range(len(llms))
        ]:
            if name not in lookup:
                if spec.on_missing == "skip":
                    missing = True
                    break
                raise AlignmentError(f"tensor '{name}' present in MLLM but absent in {label}")
            other = lookup[name]
            if other.shape != tensor.shape:
                raise AlignmentError(
                    f"shape mismatch for '{name}': MLLM {tensor.shape} vs {label} {other.shape}"
                )
            sources.append(other)
        if missing:
            continue
        triples.append(
            LayerTriple(
                canonical_name=name,
                base=sources[0],
                mllm=tensor,
                llm=sources[1:],
                kind=_classify(name),
            )
        )
    return triples
