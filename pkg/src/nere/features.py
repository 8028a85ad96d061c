"""Session log + catalog -> aligned (user-meta, set-meta, content) sequence tensors.

Column layouts
--------------
User metadata, 13 columns per session (``c`` categorical, ``f`` continuous):

 0 day_of_week c   1 hour_of_day c   2 session_length f   3 latitude f
 4 longitude f     5 term_lang c     6 def_lang c         7 platform c
 8 begin_ts f      9 end_ts f       10 study_date f      11 user_tenure f
12 session_count f

Set metadata, 12 columns per set:

 0 studier_count f        1 broad_subject c    2 mean_studier_age f
 3 term_language c        4 definition_language c    5 total_views f
 6 has_images c           7 has_diagrams c     8 preferred_study_mode c
 9 preferred_platform c  10 mean_session_length f   11 token_count f

``user_tenure`` is days since the user's first session and
``session_count`` the 1-based position of the session in the user's whole
history.  ``token_count`` is the number of distinct tokens in the set text.
Categorical columns hold integer codes (0 = unknown); continuous columns are
min-max scaled to [0, 1] with missing values imputed by the fitted mean.
"""

from __future__ import annotations

import datetime as _dt
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from nere.errors import FormatError, PreconditionError, ShapeError
from nere.synthgen import GEO_TABLE
from nere.textvec import set_tokens

log = logging.getLogger(__name__)

USER_COLUMNS = (
    ("day_of_week", "c"),
    ("hour_of_day", "c"),
    ("session_length", "f"),
    ("latitude", "f"),
    ("longitude", "f"),
    ("term_lang", "c"),
    ("def_lang", "c"),
    ("platform", "c"),
    ("begin_ts", "f"),
    ("end_ts", "f"),
    ("study_date", "f"),
    ("user_tenure", "f"),
    ("session_count", "f"),
)

SET_COLUMNS = (
    ("studier_count", "f"),
    ("broad_subject", "c"),
    ("mean_studier_age", "f"),
    ("term_language", "c"),
    ("definition_language", "c"),
    ("total_views", "f"),
    ("has_images", "c"),
    ("has_diagrams", "c"),
    ("preferred_study_mode", "c"),
    ("preferred_platform", "c"),
    ("mean_session_length", "f"),
    ("token_count", "f"),
)


class CategoricalEncoder:
    """Per-field category -> dense positive index, 0 reserved for unknown."""

    def __init__(self):
        self.maps: dict[str, dict] = {}

    def fit_field(self, name, values):
        m = self.maps.setdefault(name, {})
        for v in values:
            if v is None:
                continue
            key = _cat_key(v)
            if key not in m:
                m[key] = len(m) + 1
        return self

    def cardinality(self, name):
        return len(self.maps[name])

    def encode(self, name, value):
        if value is None:
            return 0
        return self.maps[name].get(_cat_key(value), 0)

    def encode_many(self, name, values):
        m = self.maps[name]
        return np.array([0 if v is None else m.get(_cat_key(v), 0) for v in values], dtype=np.float64)


def _cat_key(v):
    # JSON round-trips turn every key into a string
    return str(v)


@dataclass
class FeatureStats:
    min: float
    max: float
    mean: float


class ContinuousScaler:
    def __init__(self):
        self.stats: dict[str, FeatureStats] = {}

    def fit_field(self, name, values):
        arr = np.array([np.nan if v is None else float(v) for v in values], dtype=np.float64)
        finite = arr[np.isfinite(arr)]
        if finite.size == 0:
            self.stats[name] = FeatureStats(0.0, 0.0, 0.0)
        else:
            self.stats[name] = FeatureStats(float(finite.min()), float(finite.max()), float(finite.mean()))
        return self

    def transform(self, name, values):
        return transform_continuous(values, self.stats[name])


def transform_continuous(value, stats: FeatureStats):
    """Min-max scale to [0, 1] with clipping; ``None``/NaN become the mean first.

    A degenerate range (max == min) maps every value to 0.0.
    """
    scalar = np.ndim(value) == 0
    arr = np.array([np.nan if value is None else value] if scalar else
                   [np.nan if v is None else v for v in value], dtype=np.float64)
    arr = np.where(np.isfinite(arr), arr, stats.mean)
    span = stats.max - stats.min
    if span <= 0:
        out = np.zeros_like(arr)
    else:
        out = np.clip((arr - stats.min) / span, 0.0, 1.0)
    return float(out[0]) if scalar else out


def geo_features(obfuscated_ip: str) -> tuple[float, float]:
    """(latitude, longitude) for the /24 prefix, (0.0, 0.0) if unmapped."""
    prefix = obfuscated_ip.rsplit(".", 1)[0]
    hit = GEO_TABLE.get(prefix)
    if hit is None:
        log.warning("no geo entry for prefix %s; using (0.0, 0.0)", prefix)
        return (0.0, 0.0)
    return hit


# -- raw per-session / per-set features -------------------------------------

def _user_raw(sessions):
    """Raw (unencoded) user-metadata columns for every session, in input order."""
    order = sorted(range(len(sessions)), key=lambda i: (sessions[i].user_id, sessions[i].end_timestamp, sessions[i].set_id))
    first_begin = {}
    count = [0] * len(sessions)
    tenure = [0.0] * len(sessions)
    running = {}
    for i in order:
        s = sessions[i]
        first_begin.setdefault(s.user_id, s.begin_timestamp)
        running[s.user_id] = running.get(s.user_id, 0) + 1
        count[i] = running[s.user_id]
        tenure[i] = (s.begin_timestamp - first_begin[s.user_id]) / 86400.0

    cols = {name: [] for name, _ in USER_COLUMNS}
    for i, s in enumerate(sessions):
        t = _dt.datetime.fromtimestamp(s.begin_timestamp, _dt.timezone.utc)
        lat, lon = geo_features(s.obfuscated_ip)
        cols["day_of_week"].append(t.weekday())
        cols["hour_of_day"].append(t.hour)
        cols["session_length"].append(s.session_length)
        cols["latitude"].append(lat)
        cols["longitude"].append(lon)
        cols["term_lang"].append(s.preferred_term_language)
        cols["def_lang"].append(s.preferred_definition_language)
        cols["platform"].append(s.preferred_platform)
        cols["begin_ts"].append(s.begin_timestamp)
        cols["end_ts"].append(s.end_timestamp)
        cols["study_date"].append(_dt.date.fromisoformat(s.study_date).toordinal() if s.study_date else None)
        cols["user_tenure"].append(tenure[i])
        cols["session_count"].append(count[i])
    return cols


def _set_raw(catalog):
    cols = {name: [] for name, _ in SET_COLUMNS}
    for r in catalog:
        for name, _ in SET_COLUMNS:
            if name == "token_count":
                cols[name].append(len(set_tokens(r)))
            else:
                cols[name].append(getattr(r, name))
    return cols


@dataclass
class FeatureEncoders:
    categorical: CategoricalEncoder
    scaler: ContinuousScaler

    def manifest(self):
        """Column manifest consumed by the model builder."""
        def stream(prefix, columns):
            out = []
            for name, kind in columns:
                key = f"{prefix}.{name}"
                card = self.categorical.cardinality(key) if kind == "c" else 0
                out.append({"name": name, "kind": kind, "cardinality": card})
            return out

        return {"user": stream("user", USER_COLUMNS), "set": stream("set", SET_COLUMNS)}

    def to_json(self):
        return {
            "categorical": self.categorical.maps,
            "continuous": {k: [s.min, s.max, s.mean] for k, s in self.scaler.stats.items()},
        }

    @classmethod
    def from_json(cls, obj):
        enc = CategoricalEncoder()
        enc.maps = {k: dict(v) for k, v in obj["categorical"].items()}
        sc = ContinuousScaler()
        sc.stats = {k: FeatureStats(*v) for k, v in obj["continuous"].items()}
        return cls(enc, sc)

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path):
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def fit_encoders(sessions, catalog):
    """Fit categorical maps (first-seen order) and min/max/mean scaler stats."""
    if not sessions:
        raise PreconditionError("fit_encoders needs a non-empty session log")
    enc = CategoricalEncoder()
    sc = ContinuousScaler()
    for prefix, columns, raw in (("user", USER_COLUMNS, _user_raw(sessions)), ("set", SET_COLUMNS, _set_raw(catalog))):
        for name, kind in columns:
            key = f"{prefix}.{name}"
            if kind == "c":
                enc.fit_field(key, raw[name])
            else:
                sc.fit_field(key, raw[name])
    return FeatureEncoders(enc, sc)


def _encode_block(prefix, columns, raw, enc: FeatureEncoders):
    n = len(raw[columns[0][0]])
    out = np.zeros((n, len(columns)))
    for j, (name, kind) in enumerate(columns):
        key = f"{prefix}.{name}"
        if kind == "c":
            out[:, j] = enc.categorical.encode_many(key, raw[name])
        else:
            out[:, j] = enc.scaler.transform(key, raw[name]) if n else 0.0
    return out


def encode_user_meta(sessions, enc):
    return _encode_block("user", USER_COLUMNS, _user_raw(sessions), enc)


def encode_set_meta(catalog, enc):
    return _encode_block("set", SET_COLUMNS, _set_raw(catalog), enc)


@dataclass
class SequenceTensorTriple:
    user_meta: np.ndarray  # [N, T, 13]
    set_meta: np.ndarray  # [N, T, 12]
    set_content: np.ndarray  # [N, T, D]
    target: np.ndarray  # [N, D]
    row_keys: list = field(default_factory=list)  # (user_id, broad_subject)
    step_set_ids: np.ndarray = None  # [N, T]

    def __post_init__(self):
        n = self.user_meta.shape[0]
        for name in ("set_meta", "set_content", "target", "step_set_ids"):
            if getattr(self, name).shape[0] != n:
                raise ShapeError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        if len(self.row_keys) != n:
            raise ShapeError(f"row_keys has {len(self.row_keys)} entries, expected {n}")

    def __len__(self):
        return self.user_meta.shape[0]

    @property
    def T(self):
        return self.user_meta.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx, dtype=np.int64)
        return SequenceTensorTriple(
            self.user_meta[idx],
            self.set_meta[idx],
            self.set_content[idx],
            self.target[idx],
            [self.row_keys[i] for i in idx],
            self.step_set_ids[idx],
        )

    @property
    def target_ids(self):
        return self.step_set_ids[:, -1].astype(np.int64)

    def save(self, directory):
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        write_tensor(d / "user_meta.tensor", self.user_meta)
        write_tensor(d / "set_meta.tensor", self.set_meta)
        write_tensor(d / "set_content.tensor", self.set_content)
        write_tensor(d / "target.tensor", self.target)
        write_tensor(d / "step_set_ids.tensor", self.step_set_ids)
        with (d / "row_keys.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
            for uid, subj in self.row_keys:
                fh.write(json.dumps([int(uid), subj]) + "\n")

    @classmethod
    def load(cls, directory):
        d = Path(directory)
        keys = []
        with (d / "row_keys.jsonl").open("r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                try:
                    uid, subj = json.loads(line)
                except (json.JSONDecodeError, ValueError) as exc:
                    raise FormatError(f"bad row key: {exc}", line=lineno) from None
                keys.append((int(uid), subj))
        return cls(
            read_tensor(d / "user_meta.tensor"),
            read_tensor(d / "set_meta.tensor"),
            read_tensor(d / "set_content.tensor"),
            read_tensor(d / "target.tensor"),
            keys,
            read_tensor(d / "step_set_ids.tensor").astype(np.int64),
        )


def group_sessions(sessions):
    """(user_id, broad_subject) -> sessions sorted by (end_timestamp, set_id)."""
    groups = {}
    for idx, s in enumerate(sessions):
        groups.setdefault((s.user_id, s.broad_subject), []).append(idx)
    for key, members in groups.items():
        members.sort(key=lambda i: (sessions[i].end_timestamp, sessions[i].set_id, sessions[i].begin_timestamp))
    return dict(sorted(groups.items()))


def assemble_sequences(sessions, catalog, set_ids, set_vectors, encoders: FeatureEncoders, T=5) -> SequenceTensorTriple:
    """Non-overlapping length-T windows per (user, subject) group.

    Groups shorter than T are dropped; a group of length n yields n // T rows.
    The target of each row is the content vector of the window's last set.
    """
    if T < 2:
        raise PreconditionError("T must be >= 2 (inputs 1..T-1 plus a target step)")
    set_ids = np.asarray(set_ids, dtype=np.int64)
    set_vectors = np.asarray(set_vectors, dtype=np.float64)
    dim = set_vectors.shape[1] if set_vectors.ndim == 2 else 0
    id_to_row = {int(s): i for i, s in enumerate(set_ids)}
    cat_row = {r.set_id: i for i, r in enumerate(catalog)}
    for s in sessions:
        if s.set_id not in id_to_row:
            raise PreconditionError(f"no content vector for set {s.set_id}")
        if s.set_id not in cat_row:
            raise PreconditionError(f"set {s.set_id} missing from catalog")

    user_rows = encode_user_meta(sessions, encoders) if sessions else np.zeros((0, len(USER_COLUMNS)))
    set_rows = encode_set_meta(catalog, encoders) if catalog else np.zeros((0, len(SET_COLUMNS)))

    windows, keys = [], []
    for key, members in group_sessions(sessions).items():
        for k in range(len(members) // T):
            windows.append(members[k * T:(k + 1) * T])
            keys.append(key)
    n = len(windows)
    if n == 0:
        return SequenceTensorTriple(
            np.zeros((0, T, len(USER_COLUMNS))),
            np.zeros((0, T, len(SET_COLUMNS))),
            np.zeros((0, T, dim)),
            np.zeros((0, dim)),
            [],
            np.zeros((0, T), dtype=np.int64),
        )
    W = np.array(windows, dtype=np.int64)
    sid = np.array([[sessions[i].set_id for i in w] for w in windows], dtype=np.int64)
    crow = np.vectorize(cat_row.__getitem__, otypes=[np.int64])(sid)
    vrow = np.vectorize(id_to_row.__getitem__, otypes=[np.int64])(sid)
    content = set_vectors[vrow]
    return SequenceTensorTriple(
        user_meta=user_rows[W],
        set_meta=set_rows[crow],
        set_content=content,
        target=content[:, -1].copy(),
        row_keys=keys,
        step_set_ids=sid,
    )


# -- tensor files -------------------------------------------------------------

def write_tensor(path, arr):
    """Text header ``tensor <rank> <dims...>`` then little-endian float32 data."""
    arr = np.asarray(arr)
    header = "tensor " + " ".join(str(x) for x in (arr.ndim, *arr.shape)) + "\n"
    with Path(path).open("wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_tensor(path):
    with Path(path).open("rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").split()
        if len(header) < 2 or header[0] != "tensor":
            raise FormatError(f"{path}: bad tensor header", line=1)
        try:
            rank = int(header[1])
            shape = tuple(int(x) for x in header[2:])
        except ValueError:
            raise FormatError(f"{path}: non-integer tensor dims", line=1) from None
        if len(shape) != rank:
            raise FormatError(f"{path}: rank {rank} but {len(shape)} dims", line=1)
        data = fh.read()
    expected = int(np.prod(shape, dtype=np.int64)) * 4
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} payload bytes, got {len(data)}")
    return np.frombuffer(data, dtype="<f4").astype(np.float64).reshape(shape)


def assemble_latest(sessions, catalog, set_ids, set_vectors, encoders: FeatureEncoders, L=4):
    """Most recent ``L`` sessions of every (user, subject) group with >= L sessions.

    Returns ``(row_keys, user_meta [G, L, 13], set_meta [G, L, 12], content [G, L, D])``,
    the windows recommendations are generated for.
    """
    if L < 1:
        raise PreconditionError("L must be >= 1")
    set_ids = np.asarray(set_ids, dtype=np.int64)
    set_vectors = np.asarray(set_vectors, dtype=np.float64)
    id_to_row = {int(s): i for i, s in enumerate(set_ids)}
    cat_row = {r.set_id: i for i, r in enumerate(catalog)}
    keys, windows = [], []
    for key, members in group_sessions(sessions).items():
        if len(members) >= L:
            keys.append(key)
            windows.append(members[-L:])
    dim = set_vectors.shape[1]
    if not windows:
        return [], np.zeros((0, L, len(USER_COLUMNS))), np.zeros((0, L, len(SET_COLUMNS))), np.zeros((0, L, dim))
    for s in sessions:
        if s.set_id not in id_to_row or s.set_id not in cat_row:
            raise PreconditionError(f"set {s.set_id} lacks a catalog record or content vector")
    user_rows = encode_user_meta(sessions, encoders)
    set_rows = encode_set_meta(catalog, encoders)
    W = np.array(windows, dtype=np.int64)
    sid = np.array([[sessions[i].set_id for i in w] for w in windows], dtype=np.int64)
    crow = np.vectorize(cat_row.__getitem__, otypes=[np.int64])(sid)
    vrow = np.vectorize(id_to_row.__getitem__, otypes=[np.int64])(sid)
    return keys, user_rows[W], set_rows[crow], set_vectors[vrow]
