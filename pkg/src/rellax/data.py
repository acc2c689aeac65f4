"""MovieLens-style ingestion, labeling, temporal split and sample storage.

Also ships a synthetic corpus generator that writes files in the
MovieLens-1M ``::`` format, so the whole pipeline (and the test-suite) runs
through the same loader without downloads.
"""

from __future__ import annotations

import bisect
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .numerics import ContractError, rng_for

log = logging.getLogger(__name__)


class LoadError(ValueError):
    pass


@dataclass(frozen=True)
class Item:
    item_id: int
    title: str
    attributes: tuple[tuple[str, tuple[str, ...]], ...]

    def values(self, field_name: str) -> tuple[str, ...]:
        for name, vals in self.attributes:
            if name == field_name:
                return vals
        raise KeyError(f"item {self.item_id} ({self.title!r}) has no attribute {field_name!r}")

    def has(self, field_name: str) -> bool:
        return any(name == field_name for name, _ in self.attributes)


@dataclass(frozen=True)
class User:
    user_id: int
    profile: tuple[tuple[str, str], ...]

    def get(self, field_name: str) -> str:
        for name, value in self.profile:
            if name == field_name:
                return value
        raise KeyError(f"user {self.user_id} has no profile field {field_name!r}")


@dataclass(frozen=True)
class InteractionEvent:
    user_id: int
    item_id: int
    rating: float
    timestamp: int
    order: int = 0  # original file position, secondary sort key


@dataclass(frozen=True, eq=False)
class InteractionSample:
    user: User
    history: tuple[tuple[Item, int], ...]
    target: Item
    label: int
    timestamp: int
    split: str

    @property
    def history_items(self) -> list[Item]:
        return [item for item, _ in self.history]


@dataclass
class LoadReport:
    lines: int = 0
    malformed: list[tuple[str, int, str]] = field(default_factory=list)


# --------------------------------------------------------------------------
# Label rules

LABEL_RULES: dict[str, Callable[[float], int]] = {
    "ml-1m": lambda r: int(r >= 4),
    "ml-25m": lambda r: int(r > 3.0),
    "bookcrossing": lambda r: int(r > 5),
}


def label_for(rating: float, rule: str = "ml-1m") -> int:
    try:
        return LABEL_RULES[rule](rating)
    except KeyError:
        raise ContractError(f"unknown label rule {rule!r}; known: {sorted(LABEL_RULES)}") from None


# --------------------------------------------------------------------------
# MovieLens-1M

AGE_CODES = {
    "1": "under 18",
    "18": "18-24",
    "25": "25-34",
    "35": "35-44",
    "45": "45-49",
    "50": "50-55",
    "56": "56+",
}
OCCUPATION_CODES = [
    "other", "academic/educator", "artist", "clerical/admin", "college/grad student",
    "customer service", "doctor/health care", "executive/managerial", "farmer",
    "homemaker", "K-12 student", "lawyer", "programmer", "retired", "sales/marketing",
    "scientist", "self-employed", "technician/engineer", "tradesman/craftsman",
    "unemployed", "writer",
]
GENDER_CODES = {"M": "male", "F": "female"}


def _read_lines(path: Path, encoding: str) -> list[str]:
    try:
        return path.read_bytes().decode(encoding).splitlines()
    except UnicodeDecodeError as exc:
        raise LoadError(f"{path}: cannot decode as {encoding}: {exc}") from exc


def _split_fields(line: str, n: int, path: Path, lineno: int) -> list[str]:
    parts = line.split("::")
    if len(parts) != n or any(p == "" for p in parts[: n - 1]):
        raise LoadError(f"{path}:{lineno}: expected {n} '::'-separated fields, got {len(parts)}")
    return parts


def load_movielens_1m(
    directory: str | Path, encoding: str = "latin-1", strict: bool = True
) -> tuple[dict[int, Item], dict[int, User], list[InteractionEvent], LoadReport]:
    """Parse ``movies.dat``, ``users.dat`` and ``ratings.dat`` from a directory.

    With ``strict`` a malformed line raises :class:`LoadError` naming the line;
    otherwise it is skipped and listed in the returned report.
    """
    directory = Path(directory)
    report = LoadReport()
    items: dict[int, Item] = {}
    users: dict[int, User] = {}
    events: list[InteractionEvent] = []

    def bad(path: Path, lineno: int, exc: Exception) -> None:
        if strict:
            raise exc if isinstance(exc, LoadError) else LoadError(f"{path}:{lineno}: {exc}")
        report.malformed.append((path.name, lineno, str(exc)))

    path = directory / "movies.dat"
    for lineno, line in enumerate(_read_lines(path, encoding), 1):
        if not line.strip():
            continue
        report.lines += 1
        try:
            mid, title, genres = _split_fields(line, 3, path, lineno)
            genre_list = tuple(g for g in genres.split("|") if g)
            item = Item(int(mid), title, (("genres", genre_list),))
            if item.item_id in items:
                raise LoadError(f"{path}:{lineno}: duplicate movie id {item.item_id}")
            items[item.item_id] = item
        except (LoadError, ValueError) as exc:
            bad(path, lineno, exc)

    path = directory / "users.dat"
    for lineno, line in enumerate(_read_lines(path, encoding), 1):
        if not line.strip():
            continue
        report.lines += 1
        try:
            uid, gender, age, occ, zipcode = _split_fields(line, 5, path, lineno)
            occ_i = int(occ)
            profile = (
                ("gender", GENDER_CODES.get(gender, gender)),
                ("age", AGE_CODES.get(age, age)),
                ("occupation", OCCUPATION_CODES[occ_i] if 0 <= occ_i < len(OCCUPATION_CODES) else occ),
                ("zip", zipcode),
            )
            users[int(uid)] = User(int(uid), profile)
        except (LoadError, ValueError) as exc:
            bad(path, lineno, exc)

    path = directory / "ratings.dat"
    for lineno, line in enumerate(_read_lines(path, encoding), 1):
        if not line.strip():
            continue
        report.lines += 1
        try:
            uid, mid, rating, ts = _split_fields(line, 4, path, lineno)
            ev = InteractionEvent(int(uid), int(mid), float(rating), int(ts), order=len(events))
            if ev.user_id not in users or ev.item_id not in items:
                raise LoadError(f"{path}:{lineno}: unresolved user {ev.user_id} or movie {ev.item_id}")
            events.append(ev)
        except (LoadError, ValueError) as exc:
            bad(path, lineno, exc)

    if report.malformed:
        log.warning("skipped %d malformed lines", len(report.malformed))
    return items, users, events, report


# --------------------------------------------------------------------------
# Samples


def build_samples(
    events: Sequence[InteractionEvent],
    items: dict[int, Item],
    users: dict[int, User],
    rule: str = "ml-1m",
    min_history: int = 5,
    train_fraction: float = 8 / 9,
) -> list[InteractionSample]:
    """Turn every event with enough earlier history into a labeled CTR sample.

    The history of an event is every earlier event (strictly smaller
    timestamp) of the same user. Samples are ordered by (timestamp, file
    order); the first ``round(train_fraction * n)`` of them go to train, and
    any later sample sharing the boundary timestamp also goes to train.
    """
    if not events:
        raise ContractError("empty event stream")
    by_user: dict[int, list[InteractionEvent]] = {}
    for ev in events:
        by_user.setdefault(ev.user_id, []).append(ev)

    raw: list[tuple[int, int, User, tuple, Item, int]] = []
    for uid in sorted(by_user):
        evs = sorted(by_user[uid], key=lambda e: (e.timestamp, e.order))
        timeline = tuple((items[e.item_id], label_for(e.rating, rule)) for e in evs)
        stamps = [e.timestamp for e in evs]
        cache: dict[int, tuple] = {}
        for ev in evs:
            cut = bisect.bisect_left(stamps, ev.timestamp)
            if cut < min_history:
                continue
            if cut not in cache:
                cache[cut] = timeline[:cut]
            raw.append(
                (ev.timestamp, ev.order, users[uid], cache[cut], items[ev.item_id], label_for(ev.rating, rule))
            )
    if not raw:
        return []
    raw.sort(key=lambda r: (r[0], r[1]))
    n_train = min(len(raw), max(1, int(round(train_fraction * len(raw)))))
    cut_ts = raw[n_train - 1][0]
    return [
        InteractionSample(user, hist, target, label, ts, "train" if ts <= cut_ts else "test")
        for ts, _, user, hist, target, label in raw
    ]


def split_samples(samples: Iterable[InteractionSample]) -> tuple[list[InteractionSample], list[InteractionSample]]:
    train, test = [], []
    for s in samples:
        (train if s.split == "train" else test).append(s)
    return train, test


def sample_few_shot(train: Sequence[InteractionSample], shots: int, seed: int) -> list:
    """Uniform sample without replacement, returned in original order."""
    if shots > len(train):
        raise ContractError(f"shot count {shots} exceeds population {len(train)}")
    if shots == len(train):
        return list(train)
    idx = rng_for(seed, "few-shot").choice(len(train), size=shots, replace=False)
    return [train[i] for i in sorted(idx)]


def sample_to_json(s: InteractionSample) -> str:
    """One line per sample, fixed key order."""
    record = {
        "user": s.user.user_id,
        "target": s.target.item_id,
        "label": s.label,
        "timestamp": s.timestamp,
        "split": s.split,
        "history": [[item.item_id, y] for item, y in s.history],
    }
    return json.dumps(record, separators=(",", ":"))


def save_samples(path: str | Path, samples: Iterable[InteractionSample]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in samples:
            fh.write(sample_to_json(s) + "\n")


def load_samples(path: str | Path, items: dict[int, Item], users: dict[int, User]) -> list[InteractionSample]:
    out = []
    shared: dict[tuple, tuple] = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line:
            continue
        try:
            rec = json.loads(line)
            key = (rec["user"], tuple(tuple(h) for h in rec["history"]))
            if key not in shared:
                shared[key] = tuple((items[i], int(y)) for i, y in rec["history"])
            out.append(
                InteractionSample(
                    users[rec["user"]], shared[key], items[rec["target"]],
                    int(rec["label"]), int(rec["timestamp"]), rec["split"],
                )
            )
        except (KeyError, ValueError, TypeError) as exc:
            raise LoadError(f"{path}:{lineno}: bad sample record ({exc!r})") from exc
    return out


# --------------------------------------------------------------------------
# Synthetic corpus

GENRE_LEXICON: dict[str, list[str]] = {
    "Action": ["Fury", "Strike", "Bullet", "Chase", "Force", "Impact", "Blast", "Raid"],
    "Comedy": ["Crazy", "Wedding", "Party", "Goofy", "Buddies", "Mixup", "Prank", "Silly"],
    "Drama": ["Silence", "Letters", "Winter", "Promise", "Tears", "Journey", "Hope", "Grace"],
    "Horror": ["Haunting", "Blood", "Crypt", "Scream", "Curse", "Shadow", "Demon", "Grave"],
    "Romance": ["Love", "Kiss", "Heart", "Sweet", "Romeo", "Darling", "Desire", "Valentine"],
    "Sci-Fi": ["Galaxy", "Robot", "Alien", "Quantum", "Star", "Orbit", "Cyborg", "Nebula"],
    "Animation": ["Bunny", "Toy", "Dragon", "Puppy", "Magic", "Cartoon", "Kitten", "Wizard"],
    "Western": ["Outlaw", "Saddle", "Frontier", "Sheriff", "Canyon", "Rustler", "Pistol", "Ranch"],
    "Documentary": ["Truth", "Planet", "Inside", "Chronicle", "Facts", "Record", "Witness", "Archive"],
    "Musical": ["Song", "Melody", "Dance", "Rhythm", "Chorus", "Tune", "Ballet", "Opera"],
}
SHARED_WORDS = ["Night", "Day", "Return", "Story", "Legend", "City", "Road", "Secret"]


def generate_synthetic_movielens(
    directory: str | Path,
    seed: int = 0,
    n_users: int = 200,
    n_items: int = 120,
    n_genres: int = 8,
    events_per_user: tuple[int, int] = (30, 50),
    preferred_share: float = 0.6,
) -> Path:
    """Write a planted-preference corpus as ``movies.dat``/``users.dat``/``ratings.dat``.

    Every user likes two genres. Interactions lean toward those genres and
    ratings are high mostly when the movie's primary genre is preferred, so
    both genre-consistent history and the genre of the target carry signal.
    """
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rng = rng_for(seed, "synthetic-corpus")
    genres = list(GENRE_LEXICON)[:n_genres]

    movie_lines = []
    primary = np.empty(n_items, dtype=int)
    secondary = np.full(n_items, -1)
    for i in range(n_items):
        g = int(rng.integers(n_genres))
        primary[i] = g
        gl = [genres[g]]
        if rng.random() < 0.35:
            s = int(rng.choice([k for k in range(n_genres) if k != g]))
            secondary[i] = s
            gl.append(genres[s])
        lex = GENRE_LEXICON[genres[g]]
        w1 = lex[int(rng.integers(len(lex)))]
        pool = lex + SHARED_WORDS
        w2 = pool[int(rng.integers(len(pool)))]
        year = 1960 + int(rng.integers(40))
        movie_lines.append(f"{i + 1}::The {w1} {w2} ({year})::{'|'.join(gl)}")

    user_lines = []
    rating_lines = []
    t0, horizon = 978_300_000, 30_000_000
    raw_events = []
    for u in range(n_users):
        gender = "MF"[int(rng.integers(2))]
        age = list(AGE_CODES)[int(rng.integers(len(AGE_CODES)))]
        occ = int(rng.integers(len(OCCUPATION_CODES)))
        user_lines.append(f"{u + 1}::{gender}::{age}::{occ}::{10000 + int(rng.integers(89999))}")
        pref = set(rng.choice(n_genres, size=2, replace=False).tolist())
        liked_pool = np.flatnonzero(np.isin(primary, list(pref)))
        n_ev = int(rng.integers(events_per_user[0], events_per_user[1] + 1))
        start = rng.uniform(0, 0.5 * horizon)
        times = np.sort(rng.uniform(start, horizon, size=n_ev)).astype(np.int64) + t0
        seen: set[int] = set()
        for t in times:
            for _ in range(20):
                if rng.random() < preferred_share:
                    i = int(rng.choice(liked_pool))
                else:
                    i = int(rng.integers(n_items))
                if i not in seen:
                    break
            seen.add(i)
            if primary[i] in pref:
                p_pos = 0.85
            elif secondary[i] in pref:
                p_pos = 0.5
            else:
                p_pos = 0.15
            rating = int(rng.integers(4, 6)) if rng.random() < p_pos else int(rng.integers(1, 4))
            raw_events.append((int(t), u + 1, i + 1, rating))
    raw_events.sort()
    for t, uid, mid, rating in raw_events:
        rating_lines.append(f"{uid}::{mid}::{rating}::{t}")

    for name, lines in (("movies.dat", movie_lines), ("users.dat", user_lines), ("ratings.dat", rating_lines)):
        (directory / name).write_bytes(("\n".join(lines) + "\n").encode("latin-1"))
    return directory
