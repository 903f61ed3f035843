"""Reading FCS 3.0/3.1 list-mode files and the CSV fallback format.

Only the subset needed to extract an event matrix is supported: ``$MODE L``
with ``$DATATYPE`` F (32-bit floats) or I (unsigned integers). Compensation
keywords are ignored with a warning.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Sample
from .registry import FeatureRegistry

log = logging.getLogger(__name__)

HEADER_LEN = 58
VERSIONS = ("FCS3.0", "FCS3.1")
_LITTLE = {"1,2,3,4", "1,2", "1"}
_BIG = {"4,3,2,1", "2,1"}


class FcsError(ValueError):
    pass


class MalformedHeader(FcsError):
    pass


class UnsupportedFeature(FcsError):
    pass


class TruncatedData(FcsError):
    pass


class DelimiterError(FcsError):
    pass


class DuplicateKeyword(DelimiterError):
    pass


class InvalidData(FcsError):
    pass


class CsvError(ValueError):
    pass


class SchemaMismatch(CsvError):
    pass


class NonNumericCell(CsvError):
    def __init__(self, row: int, column: str, value: str):
        super().__init__(f"non-numeric cell {value!r} at row {row}, column {column!r}")
        self.row = row
        self.column = column
        self.value = value


class ManifestError(ValueError):
    pass


@dataclass(frozen=True)
class FcsHeader:
    version: str
    text_begin: int
    text_end: int
    data_begin: int
    data_end: int
    analysis_begin: int = 0
    analysis_end: int = 0


@dataclass
class FcsTextSegment:
    delimiter: bytes
    keywords: dict[str, str]

    def __getitem__(self, key: str) -> str:
        return self.keywords[_norm_key(key)]

    def get(self, key: str, default: str | None = None) -> str | None:
        return self.keywords.get(_norm_key(key), default)

    def __contains__(self, key: str) -> bool:
        return _norm_key(key) in self.keywords


@dataclass
class RawEventMatrix:
    values: np.ndarray
    channel_names: list[tuple[str, str | None]] = field(default_factory=list)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def feature_names(self) -> list[str]:
        """Stain name when present, detector name otherwise."""
        return [stain if stain else name for name, stain in self.channel_names]


def _norm_key(key: str) -> str:
    return key.upper() if key.startswith("$") else key


def _offset(field_bytes: bytes, what: str) -> int:
    text = field_bytes.decode("ascii", errors="replace").strip()
    if not text:
        return 0
    try:
        value = int(text)
    except ValueError:
        raise MalformedHeader(f"{what} offset {text!r} is not an integer") from None
    if value < 0:
        raise MalformedHeader(f"{what} offset {value} is negative")
    return value


def parse_header(buf: bytes) -> FcsHeader:
    if len(buf) < HEADER_LEN:
        raise MalformedHeader(f"file is {len(buf)} bytes, shorter than the FCS header")
    version = buf[:6].decode("ascii", errors="replace")
    if version not in VERSIONS:
        raise MalformedHeader(f"bad magic {version!r}; expected one of {VERSIONS}")
    fields = [buf[10 + 8 * i : 18 + 8 * i] for i in range(6)]
    names = ["text begin", "text end", "data begin", "data end", "analysis begin", "analysis end"]
    offsets = [_offset(f, n) for f, n in zip(fields, names)]
    header = FcsHeader(version, *offsets)
    if header.text_begin < HEADER_LEN or header.text_end <= header.text_begin:
        raise MalformedHeader(
            f"TEXT segment [{header.text_begin}, {header.text_end}] is not a valid range"
        )
    if header.text_end >= len(buf):
        raise TruncatedData(f"TEXT segment ends at {header.text_end} beyond file length {len(buf)}")
    return header


def parse_text(segment: bytes) -> FcsTextSegment:
    """Split a TEXT segment into keyword/value pairs.

    The first byte is the delimiter; a doubled delimiter is a literal
    delimiter character inside a keyword or value.
    """
    if len(segment) < 2:
        raise DelimiterError("TEXT segment is empty")
    delim = segment[0]
    tokens: list[bytes] = []
    current = bytearray()
    i, end = 1, len(segment)
    while i < end:
        c = segment[i]
        if c == delim:
            if i + 1 < end and segment[i + 1] == delim:
                current.append(delim)
                i += 2
                continue
            tokens.append(bytes(current))
            current = bytearray()
        else:
            current.append(c)
        i += 1
    if current.strip():
        tokens.append(bytes(current))
    if len(tokens) % 2:
        raise DelimiterError(f"TEXT segment holds an odd number of tokens ({len(tokens)})")
    keywords: dict[str, str] = {}
    for k, v in zip(tokens[0::2], tokens[1::2]):
        key = _norm_key(k.decode("utf-8", errors="replace").strip())
        value = v.decode("utf-8", errors="replace")
        if not key:
            raise DelimiterError("empty keyword in TEXT segment")
        if not value:
            raise DelimiterError(f"keyword {key!r} has an empty value")
        if key in keywords:
            raise DuplicateKeyword(f"keyword {key!r} appears more than once")
        keywords[key] = value
    return FcsTextSegment(bytes([delim]), keywords)


def _int_kw(text: FcsTextSegment, key: str, error=MalformedHeader) -> int:
    raw = text.get(key)
    if raw is None:
        raise error(f"required keyword {key} is missing")
    try:
        return int(raw.strip())
    except ValueError:
        try:
            as_float = float(raw.strip())
        except ValueError:
            raise error(f"keyword {key}={raw!r} is not an integer") from None
        if not math.isfinite(as_float) or as_float != int(as_float):
            raise error(f"keyword {key}={raw!r} is not an integer") from None
        return int(as_float)


def _byte_order(text: FcsTextSegment) -> str:
    raw = (text.get("$BYTEORD") or "").replace(" ", "")
    if raw in _LITTLE:
        return "<"
    if raw in _BIG:
        return ">"
    raise UnsupportedFeature(f"$BYTEORD {raw!r} is neither little- nor big-endian")


def _range_mask(text: FcsTextSegment, i: int, bits: int) -> int | None:
    raw = text.get(f"$P{i}R")
    if raw is None:
        return None
    try:
        r = int(float(raw))
    except (ValueError, OverflowError):
        raise MalformedHeader(f"$P{i}R={raw!r} is not a number") from None
    if r <= 0:
        return None
    width = min(max((r - 1).bit_length(), 1), bits)
    return (1 << width) - 1


def parse_fcs(buf: bytes) -> tuple[FcsHeader, FcsTextSegment, RawEventMatrix]:
    buf = bytes(buf)
    header = parse_header(buf)
    text = parse_text(buf[header.text_begin : header.text_end + 1])

    mode = (text.get("$MODE") or "L").strip().upper()
    if mode != "L":
        raise UnsupportedFeature(f"$MODE {mode!r} is not list mode")
    datatype = (text.get("$DATATYPE") or "").strip().upper()
    if datatype not in ("F", "I"):
        raise UnsupportedFeature(f"$DATATYPE {datatype!r} is not supported (only F and I)")
    if "$SPILLOVER" in text or "$SPILL" in text or "SPILL" in text:
        log.warning("spillover matrix present but compensation is not applied")

    n_par = _int_kw(text, "$PAR")
    n_tot = _int_kw(text, "$TOT")
    if n_par < 1:
        raise MalformedHeader(f"$PAR={n_par} must be at least 1")
    if n_tot < 0:
        raise MalformedHeader(f"$TOT={n_tot} is negative")
    if 2 * n_par > len(text.keywords):
        raise MalformedHeader(f"$PAR={n_par} exceeds the parameters described in TEXT")

    channels: list[tuple[str, str | None]] = []
    widths: list[int] = []
    for i in range(1, n_par + 1):
        name = text.get(f"$P{i}N")
        if name is None:
            raise MalformedHeader(f"parameter {i} has no $P{i}N")
        bits = _int_kw(text, f"$P{i}B")
        widths.append(bits)
        stain = text.get(f"$P{i}S")
        channels.append((name.strip(), stain.strip() if stain and stain.strip() else None))

    order = _byte_order(text)
    if datatype == "F":
        if any(b != 32 for b in widths):
            raise UnsupportedFeature(f"$DATATYPE F requires every $PnB to be 32, got {sorted(set(widths))}")
        dtype = np.dtype(f"{order}f4")
    else:
        bad = sorted({b for b in widths if b not in (8, 16, 32, 64)})
        if bad:
            raise UnsupportedFeature(f"$PnB widths {bad} are not byte-aligned integers")
        dtype = np.dtype([(f"p{i}", f"{order}u{b // 8}") for i, b in enumerate(widths)])

    row_bytes = dtype.itemsize * (n_par if datatype == "F" else 1)
    need = n_tot * row_bytes
    if n_tot == 0:
        return header, text, RawEventMatrix(np.zeros((0, n_par)), channels)

    begin, end = header.data_begin, header.data_end
    if begin == 0 and end == 0:
        begin = _int_kw(text, "$BEGINDATA")
        end = _int_kw(text, "$ENDDATA")
    if begin < HEADER_LEN or end < begin:
        raise MalformedHeader(f"DATA segment [{begin}, {end}] is not a valid range")
    if end >= len(buf):
        raise TruncatedData(
            f"DATA segment declared to end at byte {end} but the file has {len(buf)} bytes"
        )
    segment = buf[begin : end + 1]
    if len(segment) < need:
        raise TruncatedData(
            f"DATA segment holds {len(segment)} bytes; $TOT*$PAR values need {need}"
        )

    if datatype == "F":
        values = np.frombuffer(segment, dtype=dtype, count=n_tot * n_par)
        with np.errstate(invalid="ignore"):  # signalling NaNs are rejected just below
            values = values.reshape(n_tot, n_par).astype(np.float64)
        if not np.isfinite(values).all():
            raise InvalidData("DATA segment contains NaN or infinite floats")
    else:
        records = np.frombuffer(segment, dtype=dtype, count=n_tot)
        values = np.empty((n_tot, n_par), dtype=np.float64)
        for i, bits in enumerate(widths):
            column = records[f"p{i}"].astype(np.uint64)
            mask = _range_mask(text, i + 1, bits)
            if mask is not None:
                column = column & np.uint64(mask)
            values[:, i] = column
    return header, text, RawEventMatrix(values, channels)


def read_fcs(path: str | Path) -> tuple[FcsHeader, FcsTextSegment, RawEventMatrix]:
    return parse_fcs(Path(path).read_bytes())


# --- CSV fallback ---------------------------------------------------------


def load_csv_sample(text: str | io.TextIOBase, schema: dict[str, str] | None = None) -> RawEventMatrix:
    """Read a header-first CSV into a matrix.

    ``schema`` maps CSV column names to feature names. When given, the header
    must hold exactly those columns; column order follows the file.
    """
    stream = io.StringIO(text) if isinstance(text, str) else text
    reader = csv.reader(stream)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise SchemaMismatch("CSV has no header row") from None
    if not header or any(not h for h in header):
        raise SchemaMismatch(f"CSV header {header} has empty column names")
    if len(set(header)) != len(header):
        raise SchemaMismatch(f"CSV header {header} repeats a column")
    if schema is not None and set(schema) != set(header):
        missing = sorted(set(schema) - set(header))
        extra = sorted(set(header) - set(schema))
        raise SchemaMismatch(f"CSV columns differ from schema: missing {missing}, unexpected {extra}")
    rows: list[list[float]] = []
    for row_no, row in enumerate(reader, start=1):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise SchemaMismatch(f"row {row_no} has {len(row)} cells, header has {len(header)}")
        parsed = []
        for col, cell in zip(header, row):
            try:
                value = float(cell)
            except ValueError:
                raise NonNumericCell(row_no, col, cell) from None
            if not math.isfinite(value):
                raise NonNumericCell(row_no, col, cell)
            parsed.append(value)
        rows.append(parsed)
    values = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    names = [(h, schema[h] if schema else None) for h in header]
    return RawEventMatrix(values, names)


# --- transforms -----------------------------------------------------------

TRANSFORM_KINDS = ("identity", "asinh", "minmax", "zscore")


@dataclass(frozen=True)
class Transform:
    kind: str
    cofactor: float = 150.0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise ValueError(f"unknown transform {self.kind!r}; choose from {TRANSFORM_KINDS}")
        if self.kind == "asinh" and not self.cofactor > 0:
            raise ValueError(f"asinh cofactor must be positive, got {self.cofactor}")

    def __call__(self, column: np.ndarray) -> np.ndarray:
        if self.kind == "identity" or column.size == 0:
            return column
        if self.kind == "asinh":
            return np.arcsinh(column / self.cofactor)
        if self.kind == "minmax":
            lo, hi = column.min(), column.max()
            if hi == lo:
                return np.full_like(column, 0.5)
            return (column - lo) / (hi - lo)
        sd = column.std()
        if sd == 0:
            return np.zeros_like(column)
        return (column - column.mean()) / sd


def is_scatter(name: str) -> bool:
    upper = name.strip().upper()
    return upper.startswith(("FSC", "SSC")) or upper == "TIME"


@dataclass(frozen=True)
class TransformSpec:
    """Per-channel transform chains plus defaults for scatter and fluorescence."""

    # z-scoring keeps values on the same scale as the N(0, 1) encoding rows;
    # [0, 1]-scaled values are swamped by them and the model barely trains
    fluorescence: tuple[Transform, ...] = (Transform("asinh", 150.0), Transform("zscore"))
    scatter: tuple[Transform, ...] = (Transform("zscore"),)
    channels: dict[str, tuple[Transform, ...]] = field(default_factory=dict)

    @classmethod
    def default(cls) -> TransformSpec:
        return cls()

    @classmethod
    def identity(cls) -> TransformSpec:
        return cls(fluorescence=(Transform("identity"),), scatter=(Transform("identity"),))

    @classmethod
    def from_config(cls, doc) -> TransformSpec:
        """Build from ``"default"``, ``"identity"``, another kind name, or a mapping.

        A mapping may hold ``fluorescence``, ``scatter`` and ``channels`` keys whose
        values are lists of ``{"kind": ..., "cofactor": ...}`` items or kind names.
        """
        if doc is None or doc == "default":
            return cls.default()
        if doc == "identity":
            return cls.identity()
        if isinstance(doc, str):
            chain = (_transform(doc),)
            return cls(fluorescence=chain, scatter=chain)
        base = cls.default()
        unknown = set(doc) - {"fluorescence", "scatter", "channels"}
        if unknown:
            raise ValueError(f"unknown transform keys {sorted(unknown)}")
        return cls(
            fluorescence=_chain(doc["fluorescence"]) if "fluorescence" in doc else base.fluorescence,
            scatter=_chain(doc["scatter"]) if "scatter" in doc else base.scatter,
            channels={k.upper(): _chain(v) for k, v in doc.get("channels", {}).items()},
        )

    def chain_for(self, name: str, stain: str | None = None) -> tuple[Transform, ...]:
        for key in (stain, name):
            if key and key.strip().upper() in self.channels:
                return self.channels[key.strip().upper()]
        return self.scatter if is_scatter(name) else self.fluorescence


def _transform(item) -> Transform:
    if isinstance(item, str):
        return Transform(item)
    return Transform(item["kind"], float(item.get("cofactor", 150.0)))


def _chain(items) -> tuple[Transform, ...]:
    if isinstance(items, (str, dict)):
        items = [items]
    return tuple(_transform(i) for i in items)


def apply_transforms(m: RawEventMatrix, spec: TransformSpec) -> RawEventMatrix:
    out = m.values.astype(np.float64, copy=True)
    for j, (name, stain) in enumerate(m.channel_names):
        column = out[:, j]
        for step in spec.chain_for(name, stain):
            column = step(column)
        out[:, j] = column
    return RawEventMatrix(out, list(m.channel_names))


# --- manifests ------------------------------------------------------------


def read_labels(path: str | Path) -> np.ndarray:
    labels = []
    for line_no, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        if line not in ("0", "1"):
            raise ManifestError(f"{path}:{line_no}: label {line!r} is not 0 or 1")
        labels.append(line == "1")
    return np.array(labels, dtype=bool)


def load_matrix(path: str | Path, schema: dict[str, str] | None = None) -> RawEventMatrix:
    path = Path(path)
    if path.suffix.lower() == ".fcs":
        return read_fcs(path)[2]
    with open(path, newline="", encoding="utf-8") as fh:
        return load_csv_sample(fh, schema)


def load_manifest(
    path: str | Path,
    registry: FeatureRegistry,
    transform: TransformSpec | None = None,
) -> list[Sample]:
    """Load every sample listed in a JSON manifest, registering its features.

    Manifest layout::

        {"transform": "identity",
         "samples": [{"sample_id": "s1", "patient_id": "P01",
                      "path": "s1.csv", "labels": "s1.labels"}]}

    Paths are resolved relative to the manifest. ``transform`` overrides the
    manifest's own transform entry.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    if not isinstance(doc, dict) or not isinstance(doc.get("samples"), list):
        raise ManifestError(f"manifest {path} must be an object with a 'samples' list")
    spec = transform or TransformSpec.from_config(doc.get("transform", "default"))
    root = path.parent
    samples = []
    for i, entry in enumerate(doc["samples"]):
        if "path" not in entry:
            raise ManifestError(f"manifest entry {i} has no 'path'")
        matrix = apply_transforms(load_matrix(root / entry["path"], entry.get("schema")), spec)
        names = matrix.feature_names()
        panel = registry.register(names)
        labels = read_labels(root / entry["labels"]) if entry.get("labels") else None
        sample_id = str(entry.get("sample_id", Path(entry["path"]).stem))
        if matrix.values.shape[0] == 0:
            raise ManifestError(f"sample {sample_id!r} has no events")
        if labels is not None and len(labels) != matrix.values.shape[0]:
            raise ManifestError(
                f"sample {sample_id!r}: {len(labels)} labels for {matrix.values.shape[0]} events"
            )
        samples.append(
            Sample(
                panel=panel,
                events=matrix.values,
                patient_id=str(entry.get("patient_id", sample_id)),
                sample_id=sample_id,
                labels=labels,
                meta={k: v for k, v in entry.items() if k in ("dataset", "kind")},
            )
        )
    return samples
