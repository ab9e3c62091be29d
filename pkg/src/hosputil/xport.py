"""SAS Transport (XPORT v5) reader/writer plus a CSV fallback.

NHANES distributes every component file as a version 5 transport library:
80-byte card images with ASCII headers, 140-byte NAMESTR variable
descriptors, and numeric values stored as IBM System/360 hexadecimal floats.
"""
from __future__ import annotations

import csv
import io
import math
import struct
import warnings
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

from .errors import (
    DuplicateId,
    InconsistentNamestr,
    MalformedHeader,
    TruncatedFile,
    UnrepresentableName,
    UnrepresentableValue,
    UnsupportedXportVersion,
)
from .table import CATEGORICAL, NUMERIC, Column, SurveyTable

CARD = 80
NAMESTR_LEN = 140

LIBRARY_HEADER = b"HEADER RECORD*******LIBRARY HEADER RECORD!!!!!!!" + b"0" * 30 + b"  "
LIBRARY_HEADER_V8 = b"HEADER RECORD*******LIBV8   HEADER RECORD!!!!!!!"
MEMBER_PREFIX = b"HEADER RECORD*******MEMBER  HEADER RECORD!!!!!!!"
MEMBV8_PREFIX = b"HEADER RECORD*******MEMBV8  HEADER RECORD!!!!!!!"
DSCRPTR_PREFIX = b"HEADER RECORD*******DSCRPTR HEADER RECORD!!!!!!!"
NAMESTR_PREFIX = b"HEADER RECORD*******NAMESTR HEADER RECORD!!!!!!!"
OBS_PREFIX = b"HEADER RECORD*******OBS     HEADER RECORD!!!!!!!"

# first byte of a numeric missing value: '.', '_', 'A'..'Z'
MISSING_SENTINELS = frozenset(b"._ABCDEFGHIJKLMNOPQRSTUVWXYZ")
MISSING_DOT = b"\x2e" + b"\x00" * 7

_NAMESTR = struct.Struct(">hhhh8s40s8shhh2s8shhl52s")
assert _NAMESTR.size == NAMESTR_LEN

_STAMP = b"01JAN70:00:00:00"


@dataclass(frozen=True)
class VariableDescriptor:
    name: str
    label: str
    kind: str
    storage_length: int
    position: int


@dataclass(frozen=True)
class RawMember:
    member_name: str
    variables: tuple[VariableDescriptor, ...]
    observations: tuple[bytes, ...]

    @property
    def record_length(self) -> int:
        return sum(v.storage_length for v in self.variables)


# ---------------------------------------------------------------------------
# IBM hexadecimal floating point


def decode_ibm_double(raw: bytes) -> float | None:
    """Decode 2-8 bytes of IBM hex float. Returns ``None`` for a missing value."""
    if not 1 <= len(raw) <= 8:
        raise ValueError("IBM float fields are 1-8 bytes")
    raw = bytes(raw).ljust(8, b"\x00")
    if raw[0] in MISSING_SENTINELS and not any(raw[1:]):
        return None
    u = int.from_bytes(raw, "big")
    mant = u & 0x00FFFFFFFFFFFFFF
    exp = (u >> 56) & 0x7F
    value = math.ldexp(float(mant), 4 * (exp - 64) - 56)
    return -value if u >> 63 else value


def decode_ibm_array(raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorised decode of an ``(n, width)`` uint8 array. Returns (values, missing)."""
    raw = np.asarray(raw, dtype=np.uint8)
    n, width = raw.shape
    full = np.zeros((n, 8), dtype=np.uint8)
    full[:, :width] = raw
    u = full.view(">u8").reshape(n).astype(np.uint64)
    first = full[:, 0]
    rest_zero = ~np.any(full[:, 1:], axis=1)
    sentinel = np.isin(first, np.frombuffer(bytes(sorted(MISSING_SENTINELS)), dtype=np.uint8))
    missing = sentinel & rest_zero
    mant = (u & np.uint64(0x00FFFFFFFFFFFFFF)).astype(np.float64)
    exp = ((u >> np.uint64(56)) & np.uint64(0x7F)).astype(np.int64)
    values = np.ldexp(mant, (4 * (exp - 64) - 56).astype(np.int32))
    values = np.where((u >> np.uint64(63)).astype(bool), -values, values)
    values[missing] = np.nan
    return values, missing


_IBM_MAX = math.ldexp(1.0 - 2.0**-56, 4 * 63)
_IBM_MIN = math.ldexp(1.0, -4 * 65)


def encode_ibm_double(x: float | None) -> bytes:
    """Encode a double (``None``/NaN → standard '.' missing) as 8 bytes of IBM hex float."""
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return MISSING_DOT
    x = float(x)
    if math.isinf(x) or abs(x) > _IBM_MAX:
        raise UnrepresentableValue(f"{x!r} exceeds the IBM float range")
    sign = 0x80 if math.copysign(1.0, x) < 0 else 0
    if x == 0.0:
        return bytes([sign]) + b"\x00" * 7
    if abs(x) < _IBM_MIN:
        raise UnrepresentableValue(f"{x!r} is below the IBM float range")
    f, k = math.frexp(abs(x))  # abs(x) = f * 2**k, 0.5 <= f < 1
    m53 = int(f * (1 << 53))
    e16 = -(-k // 4)  # ceil(k / 4): abs(x) / 16**e16 in [1/16, 1)
    mant = m53 << (k + 3 - 4 * e16)
    return bytes([sign | (e16 + 64)]) + mant.to_bytes(7, "big")


def encode_ibm_array(values: np.ndarray, missing: np.ndarray) -> np.ndarray:
    """Vectorised encode; returns ``(n, 8)`` uint8."""
    values = np.asarray(values, dtype=np.float64)
    missing = np.asarray(missing, dtype=bool)
    obs = values[~missing]
    if obs.size:
        bad = ~np.isfinite(obs) | (np.abs(obs) > _IBM_MAX) | ((obs != 0) & (np.abs(obs) < _IBM_MIN))
        if bad.any():
            raise UnrepresentableValue(f"{obs[bad][0]!r} cannot be stored as an IBM float")
    v = np.where(missing, 1.0, values)
    f, k = np.frexp(np.abs(v))
    m53 = (f * 2.0**53).astype(np.uint64)
    e16 = -((-k) // 4)
    shift = (k + 3 - 4 * e16).astype(np.uint64)
    mant = m53 << shift
    head = (e16 + 64).astype(np.uint64)
    u = (head << np.uint64(56)) | mant
    u = np.where(v == 0, np.uint64(0), u)
    u = np.where(np.signbit(v), u | np.uint64(1 << 63), u)
    u = np.where(missing, np.uint64(0x2E << 56), u)
    return u.astype(">u8").view(np.uint8).reshape(len(v), 8)


# ---------------------------------------------------------------------------
# parsing


def _cards(data: bytes, pos: int, count: int, what: str) -> bytes:
    end = pos + count * CARD
    if end > len(data):
        raise TruncatedFile(f"stream ends inside {what} at byte {len(data)}")
    return data[pos:end]


def _text(raw: bytes) -> str:
    return raw.decode("latin-1").rstrip("\x00").strip(" ")


def parse_xport(stream: BinaryIO | bytes) -> list[RawMember]:
    """Parse every member of a version 5 transport library."""
    data = stream if isinstance(stream, (bytes, bytearray, memoryview)) else stream.read()
    data = bytes(data)
    if len(data) < CARD:
        raise TruncatedFile("stream shorter than one card")
    first = data[:CARD]
    if first.startswith(LIBRARY_HEADER_V8):
        raise UnsupportedXportVersion("XPORT v8/v9 libraries are not supported")
    if first != LIBRARY_HEADER:
        raise MalformedHeader(f"bad library header card {first[:48]!r}")
    if len(data) % CARD:
        raise TruncatedFile(f"stream length {len(data)} is not a whole number of 80-byte cards")
    _cards(data, CARD, 2, "library header")
    pos = 3 * CARD
    members = []
    while pos < len(data):
        members.append(_parse_member(data, pos))
        pos = members[-1][1]
    return [m for m, _ in members]


def _parse_member(data: bytes, pos: int) -> tuple[RawMember, int]:
    card = _cards(data, pos, 1, "member header")
    if card.startswith(MEMBV8_PREFIX):
        raise UnsupportedXportVersion("XPORT v8/v9 member header")
    if not card.startswith(MEMBER_PREFIX):
        raise MalformedHeader(f"expected member header at byte {pos}")
    try:
        namestr_len = int(card[74:78])
    except ValueError:
        raise MalformedHeader("unreadable NAMESTR length in member header") from None
    if namestr_len not in (136, 140):
        raise MalformedHeader(f"unsupported NAMESTR length {namestr_len}")
    pos += CARD
    if not _cards(data, pos, 1, "descriptor header").startswith(DSCRPTR_PREFIX):
        raise MalformedHeader(f"expected descriptor header at byte {pos}")
    pos += CARD
    desc = _cards(data, pos, 2, "member descriptor")
    if desc[:8] != b"SAS     ":
        raise MalformedHeader("member descriptor does not start with 'SAS'")
    member_name = _text(desc[8:16])
    pos += 2 * CARD
    card = _cards(data, pos, 1, "namestr header")
    if not card.startswith(NAMESTR_PREFIX):
        raise MalformedHeader(f"expected NAMESTR header at byte {pos}")
    try:
        nvars = int(card[54:58])
    except ValueError:
        raise MalformedHeader("unreadable variable count in NAMESTR header") from None
    pos += CARD
    ncards = -(-nvars * namestr_len // CARD)
    block = _cards(data, pos, ncards, "NAMESTR records")
    for i in range(ncards):
        if block[i * CARD:(i + 1) * CARD].startswith(OBS_PREFIX):
            read = i * CARD // namestr_len
            raise InconsistentNamestr(f"header declares {nvars} variables, found {read}")
    pos += ncards * CARD
    if pos < len(data) and not data[pos:pos + CARD].startswith(OBS_PREFIX):
        raise InconsistentNamestr(f"more NAMESTR records than the declared {nvars}")
    variables = []
    for i in range(nvars):
        entry = block[i * namestr_len:(i + 1) * namestr_len].ljust(NAMESTR_LEN, b"\x00")
        (ntype, _, nlng, _, nname, nlabel, *_rest) = _NAMESTR.unpack(entry)
        npos = _rest[-2]
        if ntype not in (1, 2):
            raise InconsistentNamestr(f"variable {i} has unknown type code {ntype}")
        kind = NUMERIC if ntype == 1 else CATEGORICAL
        if kind == NUMERIC and not 2 <= nlng <= 8:
            raise InconsistentNamestr(f"numeric variable {_text(nname)!r} has length {nlng}")
        if nlng <= 0:
            raise InconsistentNamestr(f"variable {_text(nname)!r} has length {nlng}")
        variables.append(VariableDescriptor(_text(nname), _text(nlabel), kind, nlng, npos))
    _check_layout(variables)
    if pos >= len(data):
        raise TruncatedFile("stream ends before the OBS header")
    pos += CARD
    end = pos
    while end < len(data) and not data[end:end + CARD].startswith(MEMBER_PREFIX):
        end += CARD
    region = data[pos:end]
    obs = _split_records(region, sum(v.storage_length for v in variables))
    return RawMember(member_name, tuple(variables), tuple(obs)), end


def _check_layout(variables: list[VariableDescriptor]) -> None:
    names = [v.name for v in variables]
    if len(set(names)) != len(names):
        raise InconsistentNamestr("duplicate variable names in member")
    expect = 0
    for v in sorted(variables, key=lambda v: v.position):
        if v.position != expect:
            raise InconsistentNamestr(f"variable {v.name!r} at offset {v.position}, expected {expect}")
        expect += v.storage_length


def _split_records(region: bytes, reclen: int) -> list[bytes]:
    if reclen == 0 or not region:
        return []
    n = len(region) // reclen
    tail = region[n * reclen:]
    if tail.strip(b" "):
        raise TruncatedFile("stream ends in the middle of an observation record")
    records = [region[i * reclen:(i + 1) * reclen] for i in range(n)]
    # Blank pad is < 80 bytes, so a pad "record" starts inside the final card.
    blank = b" " * reclen
    while records and records[-1] == blank and (len(records) - 1) * reclen > len(region) - CARD:
        records.pop()
    return records


def to_table(member: RawMember, cycle: str = "") -> SurveyTable:
    """Convert a parsed member into a SurveyTable. ``SEQN`` becomes the row id."""
    n = len(member.observations)
    buf = np.frombuffer(b"".join(member.observations), dtype=np.uint8).reshape(n, member.record_length) \
        if n else np.zeros((0, member.record_length), dtype=np.uint8)
    cols: dict[str, Column] = {}
    row_ids = None
    for v in member.variables:
        field = buf[:, v.position:v.position + v.storage_length]
        if v.kind == NUMERIC:
            values, missing = decode_ibm_array(field) if n else (np.zeros(0), np.zeros(0, dtype=bool))
            if v.name.upper() == "SEQN":
                if missing.any():
                    raise DuplicateId("SEQN has missing values")
                row_ids = values.astype(np.int64)
                continue
            cols[v.name] = Column(NUMERIC, values, missing)
        else:
            labels = [_text(bytes(r)) for r in field]
            cols[v.name] = Column.categorical([x if x else None for x in labels])
    synthetic = row_ids is None
    if synthetic:
        warnings.warn(f"member {member.member_name!r} has no SEQN; using sequential row ids")
        row_ids = np.arange(1, n + 1, dtype=np.int64)
    else:
        uniq, counts = np.unique(row_ids, return_counts=True)
        if (counts > 1).any():
            raise DuplicateId(f"SEQN {int(uniq[counts > 1][0])} repeated in member {member.member_name!r}")
    return SurveyTable(row_ids, cols, cycle, None, synthetic)


# ---------------------------------------------------------------------------
# writing


def _pad(b: bytes) -> bytes:
    return b + b" " * (-len(b) % CARD)


def _field(s: str, width: int) -> bytes:
    return s.encode("ascii").ljust(width)[:width]


def _check_name(name: str) -> None:
    if not (1 <= len(name) <= 8) or not name.isascii() or " " in name:
        raise UnrepresentableName(f"{name!r} is not a valid XPORT v5 variable name (1-8 ASCII chars)")


def write_xport(table: SurveyTable, member_name: str = "DATA") -> bytes:
    """Serialise ``table`` as a one-member XPORT v5 library. ``SEQN`` is written first."""
    _check_name(member_name)
    for name in table.names:
        _check_name(name)
        if name.upper() == "SEQN":
            raise UnrepresentableName("SEQN is reserved for the row id column")
    n = table.n_rows
    fields: list[tuple[str, str, int, np.ndarray]] = []
    seqn = encode_ibm_array(table.row_ids.astype(np.float64), np.zeros(n, dtype=bool))
    fields.append(("SEQN", NUMERIC, 8, seqn))
    for name, col in table.columns.items():
        if col.is_numeric:
            fields.append((name, NUMERIC, 8, encode_ibm_array(col.values, col.missing)))
        else:
            enc = [lv.encode("latin-1") for lv in col.levels]
            if any(b.strip(b" ") != b or not b for b in enc):
                raise UnrepresentableValue(f"{name!r}: levels must be non-empty and unpadded")
            width = max([len(b) for b in enc] + [1])
            if width > 200:
                raise UnrepresentableValue(f"{name!r}: character values longer than 200 bytes")
            rows = [b" " * width if m else enc[c].ljust(width) for c, m in zip(col.values, col.missing)]
            arr = np.frombuffer(b"".join(rows), dtype=np.uint8).reshape(n, width) if n \
                else np.zeros((0, width), dtype=np.uint8)
            fields.append((name, CATEGORICAL, width, arr))

    out = io.BytesIO()
    out.write(LIBRARY_HEADER)
    out.write(b"SAS     SAS     SASLIB  9.4     Linux   " + b" " * 24 + _STAMP)
    out.write(_pad(_STAMP))
    out.write(MEMBER_PREFIX + b"000000000000000001600000000140  ")
    out.write(DSCRPTR_PREFIX + b"0" * 30 + b"  ")
    out.write(b"SAS     " + _field(member_name, 8) + b"SASDATA 9.4     Linux   " + b" " * 24 + _STAMP)
    out.write(_STAMP + b" " * 16 + b" " * 40 + b"        ")
    out.write(NAMESTR_PREFIX + b"000000" + b"%04d" % len(fields) + b"0" * 20 + b"  ")
    names = b""
    pos = 0
    for i, (name, kind, width, _) in enumerate(fields):
        names += _NAMESTR.pack(1 if kind == NUMERIC else 2, 0, width, i + 1, _field(name, 8),
                               b" " * 40, b" " * 8, 0, 0, 0, b"  ", b" " * 8, 0, 0, pos, b"\x00" * 52)
        pos += width
    out.write(_pad(names))
    out.write(OBS_PREFIX + b"0" * 30 + b"  ")
    if n:
        rec = np.concatenate([f[3] for f in fields], axis=1)
        out.write(_pad(rec.tobytes()))
    return out.getvalue()


# ---------------------------------------------------------------------------
# file helpers


def read_xpt(path: str | Path, cycle: str = "", member: str | None = None) -> SurveyTable:
    with open(path, "rb") as fh:
        members = parse_xport(fh)
    if not members:
        raise MalformedHeader(f"{path}: library has no members")
    if member is None:
        return to_table(members[0], cycle)
    for m in members:
        if m.member_name == member:
            return to_table(m, cycle)
    raise MalformedHeader(f"{path}: no member named {member!r}")


def read_csv(path: str | Path, cycle: str = "") -> SurveyTable:
    """CSV with a header row. A first column named SEQN supplies row ids; empty cells are missing."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise MalformedHeader(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    cols: dict[str, Column] = {}
    row_ids = None
    for j, name in enumerate(header):
        cells = [r[j].strip() if j < len(r) else "" for r in body]
        try:
            nums = [None if c == "" else float(c) for c in cells]
            col = Column.numeric(nums)
        except ValueError:
            col = Column.categorical([c if c else None for c in cells])
        if j == 0 and name.upper() == "SEQN" and col.is_numeric:
            if col.missing.any():
                raise DuplicateId("SEQN has empty cells")
            row_ids = col.values.astype(np.int64)
            if len(np.unique(row_ids)) != len(row_ids):
                raise DuplicateId(f"{path}: repeated SEQN")
            continue
        cols[name] = col
    synthetic = row_ids is None
    if synthetic:
        row_ids = np.arange(1, len(body) + 1, dtype=np.int64)
    return SurveyTable(row_ids, cols, cycle, None, synthetic)


def write_csv(table: SurveyTable, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["SEQN"] + table.names)
        cols = [c.labels() for c in table.columns.values()]
        for i, rid in enumerate(table.row_ids):
            w.writerow([int(rid)] + ["" if col[i] is None else (repr(col[i]) if isinstance(col[i], float)
                                                               else col[i]) for col in cols])


def read_any(path: str | Path, cycle: str = "") -> SurveyTable:
    """Dispatch on extension: .xpt, .csv, otherwise the native table format."""
    suffix = Path(path).suffix.lower()
    if suffix == ".xpt":
        return read_xpt(path, cycle)
    if suffix == ".csv":
        return read_csv(path, cycle)
    from .table import load_table

    t = load_table(path)
    if cycle and t.cycle != cycle:
        from dataclasses import replace

        t = replace(t, cycle=cycle)
    return t
