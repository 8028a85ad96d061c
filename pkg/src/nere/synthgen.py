"""Synthetic set catalog and study-session log.

The catalog is organised into topics, each an ordered chain of chapters.
Set text mixes three token sources: a topic-specific region, a region
shared by every set at the same chapter position ("level" tokens), and a
global filler region.  The closing chapter of each topic is a review set.

Users walk a topic chain: with probability ``sequentiality`` the next
session is the chapter successor of the current set.  Otherwise the user
takes a one-session detour to another topic's review set and then resumes
the chain.  A finished chain is followed by the first chapter of a topic
from the home region's grade band of the same subject.  The home region is
a latitude band of the user's IP prefix and also sets their usual interface
language.

Everything is driven by ``numpy.random.default_rng`` streams derived from
``rng_seed`` so that identical configs give byte-identical JSONL output.
"""

from __future__ import annotations

import dataclasses
import datetime as _dt
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from nere.errors import ConfigError, PreconditionError

BROAD_SUBJECTS = (
    "Theology",
    "History",
    "Uncommon Languages",
    "Communications",
    "Formal sciences",
    "Visual Arts",
    "Social Sciences",
    "Applied Sciences",
    "Vocabulary",
    "German",
    "Performing Arts",
    "Sports",
    "French",
    "Reading Vocabulary",
    "Spanish",
    "Natural Sciences",
    "Geography",
)

LANGUAGES = ("en", "es", "fr", "de", "it", "la", "ja", "zh", "ru")
PLATFORMS = ("web", "ios", "android")
STUDY_MODES = ("flashcards", "learn", "write", "spell", "test", "match", "gravity")
# the closing chapter of every topic is a review set studied in this mode, and no other set is
REVIEW_MODE = "test"

_SUBJECT_LANGS = {
    "French": ("fr", "en"),
    "Spanish": ("es", "en"),
    "German": ("de", "en"),
}
_UNCOMMON = ("it", "la", "ja", "zh", "ru")

# decorations the tokenizer must drop
_STOP_FILLERS = ("the", "of", "a", "to", "and", "in", "is", "for", "with", "on")
_NON_ASCII = ("café", "élève", "naïve", "über", "niño", "été", "année", "façade")

_EPOCH0 = 1527811200  # 2018-06-01T00:00:00Z
_DAY = 86400

_GEO_SEED = 1618
_GEO_SIZE = 96


def _build_geo_table():
    rng = np.random.default_rng(_GEO_SEED)
    table = {}
    while len(table) < _GEO_SIZE:
        a, b, c = rng.integers(11, 224), rng.integers(0, 256), rng.integers(0, 256)
        prefix = f"{a}.{b}.{c}"
        if prefix in table:
            continue
        lat = round(float(rng.uniform(25.0, 49.0)), 4)
        lon = round(float(rng.uniform(-124.0, -67.0)), 4)
        table[prefix] = (lat, lon)
    return table


GEO_TABLE: dict[str, tuple[float, float]] = _build_geo_table()
"""Fixed /24-prefix -> (latitude, longitude) table used for synthetic IPs."""

N_REGIONS = 8


def geo_region(prefix: str, n_regions: int = N_REGIONS) -> int:
    """Latitude band (0 = southernmost) of a GEO_TABLE prefix."""
    lats = sorted(lat for lat, _ in GEO_TABLE.values())
    rank = lats.index(GEO_TABLE[prefix][0])
    return (rank * n_regions) // len(lats)


def obfuscate_ip(ip: str) -> str:
    """Zero the last octet of a dotted-quad address."""
    parts = ip.split(".")
    if len(parts) != 4:
        raise ValueError(f"not a dotted quad: {ip!r}")
    return ".".join(parts[:3] + ["0"])


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 20000
    n_sets: int = 2000
    n_topics: int = 200
    chapters_per_topic: int = 10
    sessions_per_user_min: int = 5
    sessions_per_user_max: int = 9
    sequentiality: float = 0.9
    vocab_size: int = 4000
    rng_seed: int = 7
    # text composition
    topic_vocab: int = 12
    level_vocab: int = 6
    terms_per_set_min: int = 10
    terms_per_set_max: int = 16
    topic_token_frac: float = 0.15
    level_token_frac: float = 0.0
    # topic t draws its topic tokens from [t * topic_stride, t * topic_stride + topic_vocab);
    # a stride below topic_vocab makes neighbouring topics share tokens
    topic_stride: int = 12
    # mean studier age rises with the topic index; this is its noise (years)
    age_noise: float = 1.0
    # share of non-successor moves that go to the home region's grade band
    # for the current subject instead of a uniform same-subject set
    regional_jump: float = 1.0
    # number of latitude bands the syllabus is keyed on
    n_regions: int = N_REGIONS
    # a non-successor move off an unfinished chain is a one-session detour to
    # another topic's closing set, after which the user resumes the chain
    detour_return: bool = True

    def validate(self):
        counts = {
            "n_users": self.n_users,
            "n_sets": self.n_sets,
            "n_topics": self.n_topics,
            "chapters_per_topic": self.chapters_per_topic,
            "sessions_per_user_min": self.sessions_per_user_min,
            "sessions_per_user_max": self.sessions_per_user_max,
            "vocab_size": self.vocab_size,
            "topic_vocab": self.topic_vocab,
            "level_vocab": self.level_vocab,
            "terms_per_set_min": self.terms_per_set_min,
            "terms_per_set_max": self.terms_per_set_max,
            "n_regions": self.n_regions,
        }
        for name, value in counts.items():
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be an integer >= 1, got {value!r}")
        if not 0.0 <= self.sequentiality <= 1.0:
            raise ConfigError(f"sequentiality must lie in [0, 1], got {self.sequentiality}")
        if self.sessions_per_user_min > self.sessions_per_user_max:
            raise ConfigError("sessions_per_user_min exceeds sessions_per_user_max")
        if self.terms_per_set_min > self.terms_per_set_max:
            raise ConfigError("terms_per_set_min exceeds terms_per_set_max")
        if self.n_sets > self.n_topics * self.chapters_per_topic:
            raise ConfigError(
                f"n_sets={self.n_sets} does not fit in "
                f"n_topics*chapters_per_topic={self.n_topics * self.chapters_per_topic}"
            )
        if self.topic_stride < 1 or self.age_noise < 0:
            raise ConfigError("topic_stride must be >= 1 and age_noise >= 0")
        if not 0.0 <= self.regional_jump <= 1.0:
            raise ConfigError(f"regional_jump must lie in [0, 1], got {self.regional_jump}")
        for name in ("topic_token_frac", "level_token_frac"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.topic_token_frac + self.level_token_frac > 1.0:
            raise ConfigError("topic_token_frac + level_token_frac exceeds 1")
        if self.vocab_size < self._reserved_vocab() + 1:
            raise ConfigError(
                f"vocab_size={self.vocab_size} too small; need at least "
                f"{self._reserved_vocab() + 1} for topic and level regions plus filler"
            )

    def _reserved_vocab(self):
        return self._topic_region() + self.chapters_per_topic * self.level_vocab

    def _topic_region(self):
        return (self.n_topics - 1) * self.topic_stride + self.topic_vocab


@dataclass
class SetRecord:
    set_id: int
    terms: str
    definitions: str
    studier_count: int
    broad_subject: str
    mean_studier_age: float
    term_language: str
    definition_language: str
    total_views: int
    has_images: bool
    has_diagrams: bool
    preferred_study_mode: str
    preferred_platform: str
    mean_session_length: float
    topic_id: int
    chapter_index: int


@dataclass
class UserSessionRecord:
    user_id: int
    set_id: int
    broad_subject: str
    begin_timestamp: int
    end_timestamp: int
    session_length: float
    obfuscated_ip: str
    preferred_term_language: str
    preferred_definition_language: str
    preferred_platform: str
    study_date: str


SessionLog = list  # list[UserSessionRecord], kept in generation order


_CONS = "bcdfghjklmnprstvz"
_VOWELS = "aeiou"
_SYLLABLES = [c + v for c in _CONS for v in _VOWELS]


def make_token(i: int) -> str:
    """Deterministic pseudo-word for vocabulary slot ``i`` (three syllables)."""
    n = len(_SYLLABLES)
    a, rest = i % n, i // n
    b, c = rest % n, (rest // n) % n
    word = _SYLLABLES[c] + _SYLLABLES[b] + _SYLLABLES[a]
    if i >= n**3:
        word += str(i // n**3)
    return word


def _subject_for_topics(n_topics, rng):
    """Subjects are dealt round-robin, so a subject's topics span all grades."""
    order = rng.permutation(len(BROAD_SUBJECTS))
    return [BROAD_SUBJECTS[order[t % len(BROAD_SUBJECTS)]] for t in range(n_topics)]


def _topic_langs(subject, rng):
    if subject in _SUBJECT_LANGS:
        return _SUBJECT_LANGS[subject]
    if subject == "Uncommon Languages":
        return (str(rng.choice(_UNCOMMON)), "en")
    if rng.random() < 0.1:
        return ("es", "es")
    return ("en", "en")


def _meta_profile(rng):
    """(popularity, image rate, diagram rate, study mode, base session minutes)."""
    return (
        float(rng.lognormal(5.0, 0.6)),
        float(rng.uniform(0.05, 0.6)),
        float(rng.uniform(0.0, 0.3)),
        str(rng.choice([m for m in STUDY_MODES if m != REVIEW_MODE])),
        float(rng.uniform(4.0, 14.0)),
    )


def generate_catalog(config: SynthConfig) -> list[SetRecord]:
    """Build ``config.n_sets`` sets spread over ``config.n_topics`` chapter chains."""
    config.validate()
    rng = np.random.default_rng([config.rng_seed, 0])

    n_topics = min(config.n_topics, config.n_sets)
    base, extra = divmod(config.n_sets, n_topics)
    sizes = [base + (1 if t < extra else 0) for t in range(n_topics)]
    if max(sizes) > config.chapters_per_topic:
        raise ConfigError("topic size exceeds chapters_per_topic")

    tokens = [make_token(i) for i in range(config.vocab_size)]
    topic_off = 0
    level_off = config._topic_region()
    filler_off = config._reserved_vocab()
    n_filler = config.vocab_size - filler_off

    subjects = _subject_for_topics(n_topics, rng)
    set_ids = rng.permutation(config.n_sets) + 1

    records = []
    k = 0
    for t in range(n_topics):
        subject = subjects[t]
        tlang, dlang = _topic_langs(subject, rng)
        lo = topic_off + t * config.topic_stride
        topic_tokens = tokens[lo: lo + config.topic_vocab]
        grade = 12.0 * t / max(1, n_topics - 1)
        for ch in range(1, sizes[t] + 1):
            lv = (ch - 1) % config.chapters_per_topic
            level_tokens = tokens[level_off + lv * config.level_vocab: level_off + (lv + 1) * config.level_vocab]
            n_terms = int(rng.integers(config.terms_per_set_min, config.terms_per_set_max + 1))

            def draw(count):
                src = rng.random(count)
                out = []
                for u in src:
                    if u < config.topic_token_frac:
                        out.append(topic_tokens[rng.integers(len(topic_tokens))])
                    elif u < config.topic_token_frac + config.level_token_frac:
                        out.append(level_tokens[rng.integers(len(level_tokens))])
                    else:
                        out.append(tokens[filler_off + rng.integers(n_filler)])
                return out

            terms = draw(n_terms)
            if tlang != "en" and rng.random() < 0.3:
                terms.append(str(rng.choice(_NON_ASCII)))
            defs = []
            for _ in range(n_terms):
                words = draw(int(rng.integers(1, 3)))
                if rng.random() < 0.5:
                    words.insert(0, str(rng.choice(_STOP_FILLERS)))
                defs.append(" ".join(words))

            popularity, img_p, dia_p, mode_here, session_base = _meta_profile(rng)
            studiers = max(1, int(round(popularity * 0.9 ** (ch - 1) * rng.uniform(0.8, 1.25))))
            records.append(
                SetRecord(
                    set_id=int(set_ids[k]),
                    terms=" ".join(terms),
                    definitions=" ".join(defs),
                    studier_count=studiers,
                    broad_subject=subject,
                    mean_studier_age=round(max(13.0, 13.0 + grade + 0.05 * (ch - 1) + float(rng.normal(0.0, config.age_noise))), 3),
                    term_language=tlang,
                    definition_language=dlang,
                    total_views=int(studiers * rng.uniform(2.0, 6.0)),
                    has_images=bool(rng.random() < img_p),
                    has_diagrams=bool(rng.random() < dia_p),
                    preferred_study_mode=REVIEW_MODE if ch == sizes[t] else mode_here,
                    preferred_platform=str(rng.choice(PLATFORMS, p=[0.5, 0.3, 0.2])),
                    mean_session_length=round(session_base * (1.0 + 0.03 * (ch - 1)) * float(rng.uniform(0.9, 1.1)), 3),
                    topic_id=t,
                    chapter_index=ch,
                )
            )
            k += 1
    records.sort(key=lambda r: r.set_id)
    return records


def _chain_index(catalog):
    chains = {}
    for rec in catalog:
        chains.setdefault(rec.topic_id, {})[rec.chapter_index] = rec
    by_subject = {}
    for rec in catalog:
        by_subject.setdefault(rec.broad_subject, []).append(rec)
    return chains, by_subject


def _regional_syllabus(chains, n_regions=N_REGIONS):
    """(region, subject) -> topics: each region studies one grade band of every subject.

    A subject's topics, in grade order, are cut into ``n_regions`` contiguous
    bands (southernmost region first).  A subject with fewer topics than
    regions repeats topics across neighbouring regions.
    """
    by_subject = {}
    for t in sorted(chains):
        subject = next(iter(chains[t].values())).broad_subject
        by_subject.setdefault(subject, []).append(t)
    out = {}
    for subject, ts in by_subject.items():
        for r in range(n_regions):
            lo, hi = (r * len(ts)) // n_regions, ((r + 1) * len(ts)) // n_regions
            out[r, subject] = ts[lo:max(hi, lo + 1)]
    return out


def _jump_target(rng, config, current, region, chains, syllabus, by_subject, detour=False):
    """Non-successor destination in the current subject.

    Regional moves pick a topic from the home region's grade band, others
    any topic of the subject.  A detour visits the closing (last-chapter) set
    of a topic other than the current one, so it never lands on the chapter
    successor; any other regional move opens a topic at its first chapter.
    """
    regional = rng.random() < config.regional_jump
    subject_topics = sorted({r.topic_id for r in by_subject[current.broad_subject]})
    if regional:
        topics = syllabus[region, current.broad_subject]
    elif detour:
        topics = subject_topics
    else:
        pool = by_subject[current.broad_subject]
        return pool[int(rng.integers(len(pool)))]
    if detour:
        topics = [t for t in topics if t != current.topic_id] or [t for t in subject_topics if t != current.topic_id]
        topics = topics or [current.topic_id]
        chain = chains[topics[int(rng.integers(len(topics)))]]
        return chain[max(chain)]
    # a regional move starts the chosen topic from its first chapter
    chain = chains[topics[int(rng.integers(len(topics)))]]
    return chain[min(chain)]


def successor(chains, rec):
    """Chapter successor of ``rec`` within its topic, or ``None`` at the end of the chain."""
    return chains[rec.topic_id].get(rec.chapter_index + 1)


def generate_sessions(config: SynthConfig, catalog: list[SetRecord]) -> SessionLog:
    """Generate the per-user session log that walks the catalog's chapter chains."""
    config.validate()
    if not catalog:
        raise PreconditionError("generate_sessions needs a non-empty catalog")
    rng = np.random.default_rng([config.rng_seed, 1])
    chains, by_subject = _chain_index(catalog)
    topics = sorted(chains)
    prefixes = sorted(GEO_TABLE)
    region_of = {p: geo_region(p, config.n_regions) for p in prefixes}
    syllabus = _regional_syllabus(chains, config.n_regions)

    log = []
    for uid in range(1, config.n_users + 1):
        n = int(rng.integers(config.sessions_per_user_min, config.sessions_per_user_max + 1))
        topic = topics[int(rng.integers(len(topics)))]
        chain = chains[topic]
        # a user may join a topic at any chapter, so many walks run off the end
        members = [chain[c] for c in sorted(chain)]
        current = members[int(rng.integers(len(members)))]

        home_ip = prefixes[int(rng.integers(len(prefixes)))]
        region = region_of[home_ip]
        # the interface language is mostly the home region's
        pref_t = LANGUAGES[region % len(LANGUAGES)] if rng.random() < 0.8 else str(rng.choice(LANGUAGES))
        pref_d = current.definition_language if rng.random() < 0.8 else str(rng.choice(LANGUAGES))
        platform = str(rng.choice(PLATFORMS, p=[0.5, 0.3, 0.2]))
        host = int(rng.integers(1, 255))
        study_hour = float(rng.uniform(7.0, 22.0))

        day0 = _EPOCH0 + int(rng.integers(0, 90)) * _DAY
        clock = day0 + int(study_hour * 3600)
        prev_end = None
        anchor = None  # last on-track set while the user is on a detour
        step = 0
        while step < n:
            if step > 0:
                nxt = successor(chains, current)
                if anchor is not None:
                    # back from the detour: resume the interrupted chain
                    current, anchor = successor(chains, anchor), None
                elif nxt is not None and rng.random() < config.sequentiality:
                    current = nxt
                elif nxt is not None and config.detour_return:
                    anchor = current
                    current = _jump_target(rng, config, current, region, chains, syllabus, by_subject, detour=True)
                    # the detour is an extra session, so a miss does not use up the walk faster than a hit
                    n += 1
                else:
                    current = _jump_target(rng, config, current, region, chains, syllabus, by_subject)
                gap_days = 1 + int(rng.exponential(1.5))
                hour = min(23.5, max(0.0, study_hour + float(rng.normal(0.0, 1.5))))
                clock = (prev_end // _DAY + gap_days) * _DAY + int(hour * 3600)
            begin = max(clock, prev_end + 60) if prev_end is not None else clock
            minutes = max(0.5, current.mean_session_length * float(rng.lognormal(0.0, 0.35)))
            end = begin + int(round(minutes * 60))
            ip = f"{home_ip}.{host}" if rng.random() < 0.95 else f"{prefixes[int(rng.integers(len(prefixes)))]}.{host}"
            log.append(
                UserSessionRecord(
                    user_id=uid,
                    set_id=current.set_id,
                    broad_subject=current.broad_subject,
                    begin_timestamp=int(begin),
                    end_timestamp=int(end),
                    session_length=(end - begin) / 60.0,
                    obfuscated_ip=obfuscate_ip(ip),
                    preferred_term_language=pref_t,
                    preferred_definition_language=pref_d,
                    preferred_platform=platform,
                    study_date=_dt.datetime.fromtimestamp(begin, _dt.timezone.utc).date().isoformat(),
                )
            )
            prev_end = end
            step += 1
    return log


def successor_rate(log: SessionLog, catalog: list[SetRecord]):
    """Return ``(hits, eligible)`` over consecutive per-user transitions.

    A transition is eligible when the previous set has a chapter successor;
    it is a hit when the next session studies exactly that successor.
    """
    chains, _ = _chain_index(catalog)
    by_id = {r.set_id: r for r in catalog}
    hits = eligible = 0
    prev = None
    for rec in log:
        if prev is not None and prev.user_id == rec.user_id:
            nxt = successor(chains, by_id[prev.set_id])
            if nxt is not None:
                eligible += 1
                hits += int(nxt.set_id == rec.set_id)
        prev = rec
    return hits, eligible


# -- JSONL I/O -------------------------------------------------------------

def _dumps(obj):
    return json.dumps(dataclasses.asdict(obj), ensure_ascii=False, separators=(", ", ": "))


def write_jsonl(records, path):
    path = Path(path)
    with path.open("w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(_dumps(rec))
            fh.write("\n")


def _read_jsonl(path, cls):
    from nere.errors import FormatError

    names = [f.name for f in dataclasses.fields(cls)]
    out = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"invalid JSON in {path}: {exc.msg}", line=lineno) from None
            if sorted(obj) != sorted(names):
                raise FormatError(f"unexpected fields {sorted(obj)} in {path}", line=lineno)
            out.append(cls(**obj))
    return out


def read_catalog(path) -> list[SetRecord]:
    return _read_jsonl(path, SetRecord)


def read_sessions(path) -> SessionLog:
    return _read_jsonl(path, UserSessionRecord)


__all__ = [
    "BROAD_SUBJECTS",
    "GEO_TABLE",
    "SetRecord",
    "SynthConfig",
    "UserSessionRecord",
    "generate_catalog",
    "generate_sessions",
    "geo_region",
    "obfuscate_ip",
    "read_catalog",
    "read_sessions",
    "successor_rate",
    "write_jsonl",
]
