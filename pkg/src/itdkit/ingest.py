"""Log ingestion: parse multi-source activity logs into per-user sessions.

Raw input is one CSV file per source (logon, device, file, http, email),
CERT-style: a header row, then at least the columns id, date, user, pc and
an action or detail column. A separate ground-truth file lists the event
ids that are labeled abnormal, and a type-table file fixes the mapping
from (source, action) pairs to dense integer ids so the model vocabulary
cannot drift between runs.

Every activity is encoded as ``type_id * 24 + hour_of_day``, fusing what
happened with when it happened into a single integer code.
"""

from __future__ import annotations

import csv
import hashlib
import math
import os
from dataclasses import dataclass, replace
from datetime import datetime, timezone

HOURS_PER_DAY = 24

SOURCES = ("logon", "device", "file", "http", "email")

# Per-source input schema: required columns and how to obtain the action
# name. Sources whose 5th column is a detail (filename, URL, recipient)
# use a constant action; logon/device carry an explicit activity column.
SOURCE_SCHEMAS = {
    "logon": (("id", "date", "user", "pc", "activity"), ("column", "activity")),
    "device": (("id", "date", "user", "pc", "activity"), ("column", "activity")),
    "file": (("id", "date", "user", "pc", "filename"), ("constant", "Copy")),
    "http": (("id", "date", "user", "pc", "url"), ("constant", "Visit")),
    "email": (("id", "date", "user", "pc", "to"), ("constant", "Send")),
}

DATE_FORMATS = ("%m/%d/%Y %H:%M:%S", "%Y-%m-%d %H:%M:%S")


class MalformedRecord(ValueError):
    """A raw log line violates its source schema."""


class UnknownActivityType(KeyError):
    """A (source, action) pair is missing from the activity type table."""


class EmptySplit(ValueError):
    """A temporal split produced an empty train, validation or test set."""


class ActivityTypeTable:
    """Versioned mapping from (source, action) pairs to dense type ids.

    The table is an explicit input file (one ``source/action`` per line,
    line number = type id), never inferred from data, so the code
    vocabulary M = num_types * 24 is stable across train and test.
    """

    def __init__(self, pairs):
        self.pairs = tuple((str(s), str(a)) for s, a in pairs)
        self._index = {}
        for i, pair in enumerate(self.pairs):
            if pair in self._index:
                raise ValueError(f"duplicate type table entry {pair[0]}/{pair[1]}")
            if pair[0] not in SOURCES:
                raise ValueError(f"unknown source {pair[0]!r} in type table")
            self._index[pair] = i

    @classmethod
    def from_file(cls, path):
        pairs = []
        with open(path, "r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                source, _, action = line.partition("/")
                if not action:
                    raise ValueError(f"bad type table line {line!r}")
                pairs.append((source, action))
        return cls(pairs)

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_text())

    def to_text(self):
        return "".join(f"{s}/{a}\n" for s, a in self.pairs)

    def sha256(self):
        return hashlib.sha256(self.to_text().encode("utf-8")).hexdigest()

    def __len__(self):
        return len(self.pairs)

    @property
    def num_types(self):
        return len(self.pairs)

    def type_id(self, source, action):
        try:
            return self._index[(source, action)]
        except KeyError:
            raise UnknownActivityType(f"{source}/{action}") from None

    def source_of(self, type_id):
        return self.pairs[type_id][0]

    def action_of(self, type_id):
        return self.pairs[type_id][1]

    def vocab_size(self, posthoc=False):
        """Code vocabulary M; post-hoc mode reserves one extra mask code."""
        base = self.num_types * HOURS_PER_DAY
        return base + 1 if posthoc else base

    @property
    def mask_code(self):
        return self.num_types * HOURS_PER_DAY


def default_type_table():
    """The shipped reconstruction of a CERT-style activity type set."""
    return ActivityTypeTable(
        [
            ("logon", "Logon"),
            ("logon", "Logoff"),
            ("device", "Connect"),
            ("device", "Disconnect"),
            ("file", "Copy"),
            ("http", "Visit"),
            ("email", "Send"),
        ]
    )


@dataclass(frozen=True)
class ActivityEvent:
    """One parsed log record."""

    event_id: str
    user_id: str
    timestamp: int  # epoch seconds, naive timestamps taken as UTC
    activity_type_id: int
    source: str
    is_abnormal: bool


@dataclass
class Session:
    """Chronological activity codes between a user's logon and logoff.

    ``degenerate`` flags runs of events that fell outside any
    logon-delimited window (e.g. activity before the first logon); they
    are kept so that sessionization never drops an event.
    """

    user_id: str
    session_id: str
    codes: list
    labels: list
    timestamps: list
    degenerate: bool = False

    def __post_init__(self):
        if not (len(self.codes) == len(self.labels) == len(self.timestamps)):
            raise ValueError("codes, labels and timestamps must be parallel")
        if len(self.codes) < 1:
            raise ValueError("session must contain at least one activity")

    def __len__(self):
        return len(self.codes)

    @property
    def start(self):
        return self.timestamps[0]


@dataclass
class DatasetSplit:
    train: list
    validation: list
    test: list
    imbalance_ratio: float


@dataclass(frozen=True)
class RtInstance:
    """Real-time instance: predict ``target`` from its preceding codes."""

    user_id: str
    session_id: str
    position: int
    prefix: tuple
    target: int
    label: int
    timestamp: int


@dataclass(frozen=True)
class PhInstance:
    """Post-hoc cloze instance: ``codes`` with ``position`` masked out."""

    user_id: str
    session_id: str
    position: int
    codes: tuple
    target: int
    label: int
    timestamp: int


def parse_timestamp(text):
    for fmt in DATE_FORMATS:
        try:
            dt = datetime.strptime(text.strip(), fmt)
        except ValueError:
            continue
        return int(dt.replace(tzinfo=timezone.utc).timestamp())
    raise MalformedRecord(f"unparseable timestamp {text!r}")


def hour_of(timestamp, hour_offset=0):
    return int((timestamp // 3600 + hour_offset) % HOURS_PER_DAY)


def parse_event_record(line, source, table, abnormal_ids=frozenset(), columns=None):
    """Parse one delimited log line into an ActivityEvent.

    ``columns`` gives the file's header layout; it defaults to the
    source's canonical 5-column schema. Quoted fields (URLs containing
    the delimiter) are handled by the csv reader.
    """
    if source not in SOURCE_SCHEMAS:
        raise MalformedRecord(f"unknown source {source!r}")
    schema_cols, action_rule = SOURCE_SCHEMAS[source]
    if columns is None:
        columns = schema_cols
    try:
        fields = next(csv.reader([line]))
    except (csv.Error, StopIteration) as exc:
        raise MalformedRecord(f"unreadable line: {line!r}") from exc
    if len(fields) < len(schema_cols):
        raise MalformedRecord(
            f"{source} record has {len(fields)} fields, needs {len(schema_cols)}"
        )
    row = dict(zip(columns, fields))
    for col in schema_cols:
        if col not in row or row[col] == "":
            raise MalformedRecord(f"{source} record missing column {col!r}")
    if action_rule[0] == "column":
        action = row[action_rule[1]].strip()
    else:
        action = action_rule[1]
    type_id = table.type_id(source, action)
    event_id = row["id"].strip()
    return ActivityEvent(
        event_id=event_id,
        user_id=row["user"].strip(),
        timestamp=parse_timestamp(row["date"]),
        activity_type_id=type_id,
        source=source,
        is_abnormal=event_id in abnormal_ids,
    )


def read_source_file(path, source, table, abnormal_ids=frozenset()):
    """Read one per-source CSV (header row required) into events."""
    events = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            return events
        columns = tuple(c.strip() for c in header)
        schema_cols, action_rule = SOURCE_SCHEMAS[source]
        missing = [c for c in schema_cols if c not in columns]
        if missing:
            raise MalformedRecord(f"{path}: header missing columns {missing}")
        for fields in reader:
            if not fields:
                continue
            if len(fields) < len(schema_cols):
                raise MalformedRecord(f"{path}: short record {fields!r}")
            row = dict(zip(columns, fields))
            if action_rule[0] == "column":
                action = row[action_rule[1]].strip()
            else:
                action = action_rule[1]
            event_id = row["id"].strip()
            events.append(
                ActivityEvent(
                    event_id=event_id,
                    user_id=row["user"].strip(),
                    timestamp=parse_timestamp(row["date"]),
                    activity_type_id=table.type_id(source, action),
                    source=source,
                    is_abnormal=event_id in abnormal_ids,
                )
            )
    return events


def read_ground_truth(path):
    """Ground truth file: one abnormal event id per line."""
    ids = set()
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line and not line.startswith("#"):
                ids.add(line)
    return frozenset(ids)


def encode_activity(event, hour_offset=0):
    """Activity code: type_id * 24 + local hour of day."""
    return event.activity_type_id * HOURS_PER_DAY + hour_of(event.timestamp, hour_offset)


def decode_activity(code):
    return code // HOURS_PER_DAY, code % HOURS_PER_DAY


_SOURCE_RANK = {s: i for i, s in enumerate(SOURCES)}


def group_events_by_user(events):
    """Group into per-user streams sorted by (time, source, id)."""
    streams = {}
    for ev in events:
        streams.setdefault(ev.user_id, []).append(ev)
    for user in streams:
        streams[user].sort(key=lambda e: (e.timestamp, _SOURCE_RANK[e.source], e.event_id))
    return streams


def sessionize(events, table, user_id=None, hour_offset=0):
    """Split one user's chronological event stream into sessions.

    A session opens at a logon/Logon event and closes at the first
    logon/Logoff (inclusive), at the next Logon, or at end of stream.
    Events outside any session (before the first logon, or between a
    logoff and the next logon) become degenerate flagged sessions so the
    output is an exact partition of the input.
    """
    if not events:
        return []
    if user_id is None:
        user_id = events[0].user_id
    for prev, cur in zip(events, events[1:]):
        if cur.timestamp < prev.timestamp:
            raise ValueError("events must be sorted by timestamp")

    def is_start(ev):
        return ev.source == "logon" and table.action_of(ev.activity_type_id) == "Logon"

    def is_end(ev):
        return ev.source == "logon" and table.action_of(ev.activity_type_id) == "Logoff"

    groups = []  # (events, degenerate)
    current = None
    orphans = []
    for ev in events:
        if is_start(ev):
            if current:
                groups.append((current, False))
            if orphans:
                groups.append((orphans, True))
                orphans = []
            current = [ev]
        elif current is not None:
            current.append(ev)
            if is_end(ev):
                groups.append((current, False))
                current = None
        else:
            orphans.append(ev)
    if current:
        groups.append((current, False))
    if orphans:
        groups.append((orphans, True))
    groups.sort(key=lambda g: g[0][0].timestamp)

    sessions = []
    for i, (evs, degenerate) in enumerate(groups):
        sessions.append(
            Session(
                user_id=user_id,
                session_id=f"{user_id}-s{i:04d}",
                codes=[encode_activity(e, hour_offset) for e in evs],
                labels=[int(e.is_abnormal) for e in evs],
                timestamps=[e.timestamp for e in evs],
                degenerate=degenerate,
            )
        )
    return sessions


def dedup_http(session, table):
    """Drop repeated http activities with the same code in the same
    calendar hour, keeping the first occurrence. Abnormal-labeled
    activities are never removed (preprocessing must not change the
    abnormal count)."""
    keep = []
    seen = set()
    for i, code in enumerate(session.codes):
        type_id = code // HOURS_PER_DAY
        if table.source_of(type_id) == "http":
            key = (code, session.timestamps[i] // 3600)
            if key in seen and not session.labels[i]:
                continue
            seen.add(key)
        keep.append(i)
    if len(keep) == len(session.codes):
        return session
    return replace(
        session,
        codes=[session.codes[i] for i in keep],
        labels=[session.labels[i] for i in keep],
        timestamps=[session.timestamps[i] for i in keep],
    )


def build_sessions(raw_dir, table, ground_truth_path=None, hour_offset=0,
                   http_dedup=True):
    """Full ingest pipeline: read all per-source files in ``raw_dir``,
    merge per user, sessionize and (optionally) dedup http repeats."""
    abnormal_ids = frozenset()
    if ground_truth_path and os.path.exists(ground_truth_path):
        abnormal_ids = read_ground_truth(ground_truth_path)
    events = []
    found = False
    for source in SOURCES:
        path = os.path.join(raw_dir, f"{source}.csv")
        if os.path.exists(path):
            found = True
            events.extend(read_source_file(path, source, table, abnormal_ids))
    if not found:
        raise FileNotFoundError(f"no per-source csv files found in {raw_dir}")
    sessions = []
    streams = group_events_by_user(events)
    for user in sorted(streams):
        user_sessions = sessionize(streams[user], table, user_id=user,
                                   hour_offset=hour_offset)
        if http_dedup:
            user_sessions = [dedup_http(s, table) for s in user_sessions]
        sessions.extend(user_sessions)
    return sessions


def activity_imbalance_ratio(sessions):
    """Majority / minority count over per-activity labels."""
    n_abn = sum(sum(s.labels) for s in sessions)
    n_norm = sum(len(s) for s in sessions) - n_abn
    if min(n_norm, n_abn) == 0:
        return math.inf
    return max(n_norm, n_abn) / min(n_norm, n_abn)


def split_by_time(sessions, test_start, test_end=None, val_fraction=0.1):
    """Assign sessions to train/validation/test by session start time.

    Sessions starting at or after ``test_start`` (and before ``test_end``
    if given) form the test set; the remainder is ordered by start time
    and its trailing ``val_fraction`` becomes validation.
    """
    pre, test = [], []
    for s in sessions:
        if s.start >= test_start:
            if test_end is None or s.start < test_end:
                test.append(s)
        else:
            pre.append(s)
    pre.sort(key=lambda s: (s.start, s.user_id, s.session_id))
    test.sort(key=lambda s: (s.start, s.user_id, s.session_id))
    n_val = int(round(val_fraction * len(pre)))
    if val_fraction > 0 and n_val == 0 and len(pre) > 1:
        n_val = 1
    train, val = pre[: len(pre) - n_val], pre[len(pre) - n_val:]
    if not train or not val or not test:
        raise EmptySplit(
            f"empty partition: train={len(train)} val={len(val)} test={len(test)}"
        )
    return DatasetSplit(
        train=train,
        validation=val,
        test=test,
        imbalance_ratio=activity_imbalance_ratio(train),
    )


def make_rt_subsequences(session, max_len=256):
    """Real-time training/scoring instances: one per position >= 2,
    pairing the (truncated) preceding codes with the position's code."""
    out = []
    for i in range(1, len(session)):
        lo = max(0, i - max_len)
        out.append(
            RtInstance(
                user_id=session.user_id,
                session_id=session.session_id,
                position=i,
                prefix=tuple(session.codes[lo:i]),
                target=session.codes[i],
                label=session.labels[i],
                timestamp=session.timestamps[i],
            )
        )
    return out


def make_ph_instances(session, mask_code):
    """Post-hoc cloze instances: one per position, with it masked out."""
    out = []
    for t in range(len(session)):
        codes = list(session.codes)
        codes[t] = mask_code
        out.append(
            PhInstance(
                user_id=session.user_id,
                session_id=session.session_id,
                position=t,
                codes=tuple(codes),
                target=session.codes[t],
                label=session.labels[t],
                timestamp=session.timestamps[t],
            )
        )
    return out


INSTANCE_HEADER = ("user_id", "session_id", "position", "code", "label", "timestamp")


def write_instance_file(path, sessions):
    """Columnar per-activity file: user_id, session_id, position, code,
    label, timestamp (CSV with header)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(INSTANCE_HEADER)
        for s in sessions:
            for pos in range(len(s)):
                writer.writerow(
                    [s.user_id, s.session_id, pos, s.codes[pos], s.labels[pos],
                     s.timestamps[pos]]
                )


def read_instance_file(path):
    """Inverse of write_instance_file; rebuilds Session objects."""
    rows = {}
    order = []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if tuple(header) != INSTANCE_HEADER:
            raise MalformedRecord(f"{path}: unexpected header {header}")
        for user, sid, pos, code, label, ts in reader:
            key = (user, sid)
            if key not in rows:
                rows[key] = []
                order.append(key)
            rows[key].append((int(pos), int(code), int(label), int(ts)))
    sessions = []
    for user, sid in order:
        entries = sorted(rows[(user, sid)])
        sessions.append(
            Session(
                user_id=user,
                session_id=sid,
                codes=[e[1] for e in entries],
                labels=[e[2] for e in entries],
                timestamps=[e[3] for e in entries],
            )
        )
    return sessions
