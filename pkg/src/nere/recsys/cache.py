"""Recommendation cache file (local stand-in for the serving cache).

First line is a JSON header; every following line is one record::

    {"format": "nere-recommendation-cache", "version": 1, "model_hash": ...,
     "generated_at": ..., "m": ..., "n_records": ...}
    {"user_id": 17, "subject": "French", "set_ids": [...], "distances": [...]}
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from nere.errors import FormatError, PreconditionError

FORMAT = "nere-recommendation-cache"


@dataclass
class RecommendationCache:
    model_hash: str
    generated_at: int
    m: int
    # (user_id, subject) -> (set_ids, distances), kept in insertion order
    entries: dict = field(default_factory=dict)

    def add(self, user_id, subject, set_ids, distances):
        set_ids = [int(s) for s in set_ids]
        distances = [float(d) for d in distances]
        _check_record(set_ids, distances, self.m)
        self.entries[(int(user_id), str(subject))] = (set_ids, distances)

    def __len__(self):
        return len(self.entries)

    def __eq__(self, other):
        if not isinstance(other, RecommendationCache):
            return NotImplemented
        return (
            self.model_hash == other.model_hash
            and self.generated_at == other.generated_at
            and self.m == other.m
            and list(self.entries.items()) == list(other.entries.items())
        )


def _check_record(set_ids, distances, m, line=None):
    err = PreconditionError if line is None else (lambda msg: FormatError(msg, line=line))
    if len(set_ids) != m or len(distances) != m:
        raise err(f"expected {m} ids and distances, got {len(set_ids)}/{len(distances)}")
    if len(set(set_ids)) != len(set_ids):
        raise err("duplicate set ids in a recommendation list")
    if any(b < a for a, b in zip(distances, distances[1:])):
        raise err("distances are not ascending")


def export_cache(cache: RecommendationCache, path):
    header = {
        "format": FORMAT,
        "version": 1,
        "model_hash": cache.model_hash,
        "generated_at": int(cache.generated_at),
        "m": int(cache.m),
        "n_records": len(cache.entries),
    }
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(header) + "\n")
        for (uid, subject), (ids, dists) in cache.entries.items():
            rec = {"user_id": uid, "subject": subject, "set_ids": ids, "distances": dists}
            fh.write(json.dumps(rec, ensure_ascii=False) + "\n")


def load_cache(path, catalog_ids=None) -> RecommendationCache:
    """Parse and validate a cache file; ``catalog_ids`` optionally checks membership."""
    try:
        text = Path(path).read_text(encoding="utf-8")
    except (OSError, UnicodeDecodeError) as exc:
        raise FormatError(f"cannot read {path}: {exc}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    elif lines:
        raise FormatError("missing trailing newline (truncated file?)", line=len(lines))
    if not lines:
        raise FormatError("empty cache file, header missing", line=1)
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise FormatError(f"bad header: {exc.msg}", line=1) from None
    if not isinstance(header, dict) or header.get("format") != FORMAT:
        raise FormatError("not a recommendation cache header", line=1)
    try:
        cache = RecommendationCache(str(header["model_hash"]), int(header["generated_at"]), int(header["m"]))
        expected = int(header["n_records"])
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"incomplete header: {exc}", line=1) from None
    for lineno, line in enumerate(lines[1:], 2):
        try:
            rec = json.loads(line)
            uid, subject = int(rec["user_id"]), str(rec["subject"])
            ids, dists = list(rec["set_ids"]), list(rec["distances"])
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"malformed record: {exc}", line=lineno) from None
        _check_record(ids, dists, cache.m, line=lineno)
        if catalog_ids is not None and any(i not in catalog_ids for i in ids):
            raise FormatError("set id not in catalog", line=lineno)
        if (uid, subject) in cache.entries:
            raise FormatError(f"duplicate record for {(uid, subject)}", line=lineno)
        cache.entries[(uid, subject)] = ([int(i) for i in ids], [float(d) for d in dists])
    if len(cache.entries) != expected:
        raise FormatError(f"header announces {expected} records, found {len(cache.entries)}", line=len(lines))
    return cache
