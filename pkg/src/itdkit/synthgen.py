"""Deterministic CERT-shaped synthetic log generation.

Produces the same per-source CSV files the ingest pipeline consumes,
plus a ground-truth file of injected abnormal event ids, a type table,
and an echo of the generating config. Users follow Markov activity
profiles over (http, email, file, device) actions inside daily
logon..logoff sessions; anomalies are injected as off-hours sessions,
evening device/file exfiltration bursts, or rare-type insertions into
normal sessions, until the requested anomaly rate is met.

Output is byte-identical for identical (config, seed).
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, asdict
from datetime import datetime, timezone

import numpy as np

from .ingest import SOURCES, default_type_table

ACTIONS = ("http", "email", "file", "device")
STATES = ("start",) + ACTIONS
PATTERNS = ("off_hours", "device_burst", "rare_type")

DATE_FMT = "%m/%d/%Y %H:%M:%S"


class InvalidConfig(ValueError):
    pass


@dataclass
class Profile:
    name: str
    weight: float
    workday_prob: float
    logon_hour_mean: float
    logon_hour_std: float
    session_len_mean: float
    session_len_min: int
    session_len_max: int
    gap_minutes_mean: float
    transitions: dict
    # legitimate evening sessions: anomaly-confusable but normal-labeled
    overtime_prob: float = 0.0
    overtime_hour_mean: float = 19.0

    def validate(self):
        if not 0 < self.workday_prob <= 1:
            raise InvalidConfig(f"profile {self.name}: bad workday_prob")
        if self.session_len_min < 1 or self.session_len_max < self.session_len_min:
            raise InvalidConfig(f"profile {self.name}: bad session length bounds")
        if self.gap_minutes_mean <= 0:
            raise InvalidConfig(f"profile {self.name}: bad gap_minutes_mean")
        for state in STATES:
            row = self.transitions.get(state)
            if row is None:
                raise InvalidConfig(f"profile {self.name}: missing transitions[{state}]")
            if set(row) - set(ACTIONS):
                raise InvalidConfig(f"profile {self.name}: unknown action in {state}")
            total = sum(row.values())
            if abs(total - 1.0) > 1e-9:
                raise InvalidConfig(
                    f"profile {self.name}: transitions[{state}] sums to {total}"
                )


@dataclass
class SynthConfig:
    n_users: int
    days: int
    seed: int
    anomaly_rate: float
    anomaly_patterns: list
    profiles: list
    start_date: str = "2020-01-06"
    insider_fraction: float = 0.12

    def validate(self):
        if self.n_users < 1 or self.days < 1:
            raise InvalidConfig("n_users and days must be positive")
        if not 0 < self.anomaly_rate <= 0.05:
            raise InvalidConfig("anomaly_rate must lie in (0, 0.05]")
        for p in self.anomaly_patterns:
            if p not in PATTERNS:
                raise InvalidConfig(f"unknown anomaly pattern {p!r}")
        if not self.profiles:
            raise InvalidConfig("at least one profile required")
        for p in self.profiles:
            p.validate()
        if not 0 < self.insider_fraction <= 1:
            raise InvalidConfig("insider_fraction must lie in (0, 1]")

    @property
    def start_epoch(self):
        dt = datetime.strptime(self.start_date, "%Y-%m-%d")
        return int(dt.replace(tzinfo=timezone.utc).timestamp())

    def to_dict(self):
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise InvalidConfig(f"unknown synth config keys: {sorted(unknown)}")
        profiles = [
            p if isinstance(p, Profile) else Profile(**p)
            for p in data.get("profiles", [])
        ]
        data["profiles"] = profiles
        try:
            cfg = cls(**data)
        except TypeError as exc:
            raise InvalidConfig(str(exc)) from None
        cfg.validate()
        return cfg


def default_profiles():
    """Two office rhythms: a browsing-heavy clerk and a file-heavy
    engineer. Both touch removable devices rarely, so the injected
    device/file bursts stand out."""
    clerk = Profile(
        name="clerk",
        weight=0.55,
        workday_prob=0.55,
        logon_hour_mean=9.0,
        logon_hour_std=1.2,
        session_len_mean=5.0,
        session_len_min=2,
        session_len_max=10,
        gap_minutes_mean=22.0,
        overtime_prob=0.08,
        overtime_hour_mean=18.5,
        transitions={
            "start": {"http": 0.62, "email": 0.28, "file": 0.08, "device": 0.02},
            "http": {"http": 0.55, "email": 0.30, "file": 0.13, "device": 0.02},
            "email": {"http": 0.52, "email": 0.28, "file": 0.18, "device": 0.02},
            "file": {"http": 0.45, "email": 0.30, "file": 0.23, "device": 0.02},
            "device": {"http": 0.40, "email": 0.30, "file": 0.28, "device": 0.02},
        },
    )
    engineer = Profile(
        name="engineer",
        weight=0.45,
        workday_prob=0.50,
        logon_hour_mean=10.0,
        logon_hour_std=1.4,
        session_len_mean=5.5,
        session_len_min=2,
        session_len_max=11,
        gap_minutes_mean=26.0,
        overtime_prob=0.10,
        overtime_hour_mean=19.5,
        transitions={
            "start": {"http": 0.35, "email": 0.15, "file": 0.47, "device": 0.03},
            "http": {"http": 0.38, "email": 0.17, "file": 0.42, "device": 0.03},
            "email": {"http": 0.30, "email": 0.15, "file": 0.52, "device": 0.03},
            "file": {"http": 0.27, "email": 0.18, "file": 0.52, "device": 0.03},
            "device": {"http": 0.25, "email": 0.15, "file": 0.57, "device": 0.03},
        },
    )
    return [clerk, engineer]


def default_config(n_users=40, days=20, anomaly_rate=0.005, seed=7,
                   anomaly_patterns=PATTERNS):
    return SynthConfig(
        n_users=n_users,
        days=days,
        seed=seed,
        anomaly_rate=anomaly_rate,
        anomaly_patterns=list(anomaly_patterns),
        profiles=default_profiles(),
    )


@dataclass
class GenEvent:
    timestamp: int
    user: str
    pc: str
    source: str
    action: str
    detail: str
    abnormal: bool = False
    event_id: str = ""


@dataclass
class GenerationStats:
    n_normal: int
    n_abnormal: int
    n_sessions: int
    files: list


_URL_HOSTS = (
    "news.example.org", "wiki.example.com", "mail.example.net",
    "portal.example.com", "search.example.org",
)
_EXFIL_HOSTS = ("fileshare.example.io", "paste.example.io")


def _http_detail(rng):
    host = _URL_HOSTS[int(rng.integers(len(_URL_HOSTS)))]
    page = int(rng.integers(1000))
    # occasionally embed a comma so downstream parsing must honor quoting
    if rng.random() < 0.08:
        return f"http://{host}/q?tags=a{page},b{page}"
    return f"http://{host}/page{page}"


def _file_detail(rng):
    ext = ("docx", "pdf", "xlsx")[int(rng.integers(3))]
    return f"doc_{int(rng.integers(100000)):05d}.{ext}"


def _email_detail(rng):
    return f"user{int(rng.integers(2000)):04d}@corp.example"


def _detail_for(rng, action, exfil=False):
    if action == "http":
        if exfil:
            host = _EXFIL_HOSTS[int(rng.integers(len(_EXFIL_HOSTS)))]
            return f"http://{host}/upload{int(rng.integers(1000))}"
        return _http_detail(rng)
    if action == "file":
        return _file_detail(rng)
    if action == "email":
        return _email_detail(rng)
    return ""


def _draw(rng, weights):
    names = list(weights)
    probs = np.array([weights[n] for n in names], dtype=float)
    probs = probs / probs.sum()
    return names[int(rng.choice(len(names), p=probs))]


def _gap_seconds(rng, mean_minutes):
    # capped so a session cannot run into the next day's sessions
    return int(min(max(30, rng.exponential(mean_minutes * 60.0)), 1800))


def _normal_session(rng, user, pc, profile, day_epoch, evening=False):
    """One logon..logoff session following the profile's Markov chain."""
    if evening:
        hour = float(np.clip(rng.normal(profile.overtime_hour_mean, 1.0),
                             17.0, 22.0))
    else:
        hour = float(np.clip(rng.normal(profile.logon_hour_mean,
                                        profile.logon_hour_std), 5.0, 14.0))
    t = day_epoch + int(hour * 3600) + int(rng.integers(0, 600))
    events = [GenEvent(t, user, pc, "logon", "Logon", "")]
    n_inner = int(np.clip(round(rng.normal(profile.session_len_mean, 1.5)),
                          profile.session_len_min, profile.session_len_max))
    state = "start"
    device_open = False
    for _ in range(n_inner):
        action = _draw(rng, profile.transitions[state])
        t += _gap_seconds(rng, profile.gap_minutes_mean)
        if action == "device":
            if device_open:
                events.append(GenEvent(t, user, pc, "device", "Disconnect", ""))
                device_open = False
            else:
                events.append(GenEvent(t, user, pc, "device", "Connect", ""))
                device_open = True
        elif action == "file":
            events.append(GenEvent(t, user, pc, "file", "Copy", _file_detail(rng)))
        elif action == "http":
            events.append(GenEvent(t, user, pc, "http", "Visit", _http_detail(rng)))
        else:
            events.append(GenEvent(t, user, pc, "email", "Send", _email_detail(rng)))
        state = action
    if device_open:
        t += _gap_seconds(rng, 2.0)
        events.append(GenEvent(t, user, pc, "device", "Disconnect", ""))
    t += _gap_seconds(rng, 5.0)
    events.append(GenEvent(t, user, pc, "logon", "Logoff", ""))
    return events


def _inject_off_hours(rng, user, pc, day_epoch):
    """Small-hours session with device and file activity."""
    t = day_epoch + int(rng.uniform(1.0, 4.0) * 3600)
    events = [GenEvent(t, user, pc, "logon", "Logon", "", True)]
    t += int(rng.integers(60, 240))
    events.append(GenEvent(t, user, pc, "device", "Connect", "", True))
    for _ in range(int(rng.integers(2, 5))):
        t += int(rng.integers(60, 300))
        events.append(GenEvent(t, user, pc, "file", "Copy", _file_detail(rng), True))
    if rng.random() < 0.5:
        t += int(rng.integers(60, 300))
        events.append(GenEvent(t, user, pc, "http", "Visit",
                               _detail_for(rng, "http", exfil=True), True))
    t += int(rng.integers(60, 240))
    events.append(GenEvent(t, user, pc, "device", "Disconnect", "", True))
    t += int(rng.integers(60, 240))
    events.append(GenEvent(t, user, pc, "logon", "Logoff", "", True))
    return events


def _inject_device_burst(rng, user, pc, day_epoch):
    """Evening session: device connect plus a burst of copies and
    uploads to an unusual host."""
    t = day_epoch + int(rng.uniform(19.0, 22.0) * 3600)
    events = [GenEvent(t, user, pc, "logon", "Logon", "", True)]
    t += int(rng.integers(60, 180))
    events.append(GenEvent(t, user, pc, "device", "Connect", "", True))
    for _ in range(int(rng.integers(3, 7))):
        t += int(rng.integers(40, 200))
        events.append(GenEvent(t, user, pc, "file", "Copy", _file_detail(rng), True))
    t += int(rng.integers(60, 200))
    events.append(GenEvent(t, user, pc, "http", "Visit",
                           _detail_for(rng, "http", exfil=True), True))
    t += int(rng.integers(60, 200))
    events.append(GenEvent(t, user, pc, "device", "Disconnect", "", True))
    t += int(rng.integers(60, 200))
    events.append(GenEvent(t, user, pc, "logon", "Logoff", "", True))
    return events


def _inject_rare_type(rng, session):
    """Splice device+copy activity into the middle of a normal session."""
    if len(session) < 3:
        return []
    idx = int(rng.integers(1, len(session) - 1))
    lo = session[idx - 1].timestamp
    hi = session[idx].timestamp
    if hi - lo < 8:
        return []
    user, pc = session[0].user, session[0].pc
    ts = np.sort(rng.integers(lo + 1, hi, size=3))
    ts = sorted(set(int(x) for x in ts))
    actions = [("device", "Connect", ""),
               ("file", "Copy", _file_detail(rng)),
               ("device", "Disconnect", "")][: len(ts)]
    injected = [GenEvent(int(t), user, pc, src, act, det, True)
                for t, (src, act, det) in zip(ts, actions)]
    session[idx:idx] = injected
    return injected


def generate(config, out_dir):
    """Generate raw logs + ground truth under ``out_dir``.

    Returns GenerationStats. Deterministic per (config, seed).
    """
    config.validate()
    rng = np.random.default_rng(config.seed)
    day0 = config.start_epoch

    weights = np.array([p.weight for p in config.profiles], dtype=float)
    weights = weights / weights.sum()
    user_profiles = [
        config.profiles[int(rng.choice(len(config.profiles), p=weights))]
        for _ in range(config.n_users)
    ]
    users = [f"U{i:04d}" for i in range(config.n_users)]
    pcs = [f"PC{i:04d}" for i in range(config.n_users)]

    # normal traffic, kept per (user, day) so anomalies can splice in;
    # per-user time intervals prevent overlapping sessions
    sessions = {}  # (user_idx, day) -> list of session event lists
    intervals = {u: [] for u in range(config.n_users)}
    n_normal = 0

    def no_overlap(u, events):
        t0, t1 = events[0].timestamp - 60, events[-1].timestamp + 60
        return all(t1 < a or b < t0 for a, b in intervals[u])

    def register(u, events):
        intervals[u].append((events[0].timestamp, events[-1].timestamp))

    for u in range(config.n_users):
        profile = user_profiles[u]
        for day in range(config.days):
            if rng.random() >= profile.workday_prob:
                continue
            sess = _normal_session(rng, users[u], pcs[u], profile,
                                   day0 + day * 86400)
            sessions.setdefault((u, day), []).append(sess)
            register(u, sess)
            n_normal += len(sess)
            if rng.random() < profile.overtime_prob:
                sess = _normal_session(rng, users[u], pcs[u], profile,
                                       day0 + day * 86400, evening=True)
                if no_overlap(u, sess):
                    sessions[(u, day)].append(sess)
                    register(u, sess)
                    n_normal += len(sess)

    # anomaly injection up to the target count
    n_abnormal = 0
    if config.anomaly_patterns:
        target = max(1, int(round(n_normal * config.anomaly_rate)))
        n_insiders = max(1, int(round(config.insider_fraction * config.n_users)))
        insiders = sorted(rng.choice(config.n_users, size=n_insiders,
                                     replace=False).tolist())
        used = set()
        attempts = 0
        while n_abnormal < target and attempts < 200 * target:
            attempts += 1
            u = insiders[int(rng.integers(len(insiders)))]
            day = int(rng.integers(config.days))
            pattern = config.anomaly_patterns[
                int(rng.integers(len(config.anomaly_patterns)))]
            key = (u, day, pattern)
            if key in used:
                continue
            if pattern == "off_hours":
                sess = _inject_off_hours(rng, users[u], pcs[u], day0 + day * 86400)
                if not no_overlap(u, sess):
                    continue
                sessions.setdefault((u, day), []).append(sess)
                register(u, sess)
                used.add(key)
                n_abnormal += len(sess)
            elif pattern == "device_burst":
                sess = _inject_device_burst(rng, users[u], pcs[u], day0 + day * 86400)
                if not no_overlap(u, sess):
                    continue
                sessions.setdefault((u, day), []).append(sess)
                register(u, sess)
                used.add(key)
                n_abnormal += len(sess)
            else:  # rare_type needs an existing normal session
                day_sessions = sessions.get((u, day))
                if not day_sessions:
                    continue
                injected = _inject_rare_type(rng, day_sessions[0])
                if injected:
                    used.add(key)
                    n_abnormal += len(injected)

    # flatten, order chronologically, assign ids
    all_events = [ev for sess_list in sessions.values() for sess in sess_list
                  for ev in sess]
    src_rank = {s: i for i, s in enumerate(SOURCES)}
    all_events.sort(key=lambda e: (e.timestamp, src_rank[e.source], e.user))
    for i, ev in enumerate(all_events):
        ev.event_id = f"E{i:08d}"

    os.makedirs(out_dir, exist_ok=True)
    files = []
    headers = {
        "logon": ("id", "date", "user", "pc", "activity"),
        "device": ("id", "date", "user", "pc", "activity"),
        "file": ("id", "date", "user", "pc", "filename"),
        "http": ("id", "date", "user", "pc", "url"),
        "email": ("id", "date", "user", "pc", "to"),
    }
    for source in SOURCES:
        path = os.path.join(out_dir, f"{source}.csv")
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(headers[source])
            for ev in all_events:
                if ev.source != source:
                    continue
                date = datetime.fromtimestamp(ev.timestamp, tz=timezone.utc)
                last = ev.action if source in ("logon", "device") else ev.detail
                writer.writerow([ev.event_id, date.strftime(DATE_FMT),
                                 ev.user, ev.pc, last])
        files.append(path)

    gt_path = os.path.join(out_dir, "ground_truth.txt")
    with open(gt_path, "w", encoding="utf-8") as fh:
        for ev in all_events:
            if ev.abnormal:
                fh.write(ev.event_id + "\n")
    files.append(gt_path)

    table_path = os.path.join(out_dir, "type_table.txt")
    default_type_table().save(table_path)
    files.append(table_path)

    n_sessions = sum(len(v) for v in sessions.values())
    return GenerationStats(
        n_normal=n_normal,
        n_abnormal=n_abnormal,
        n_sessions=n_sessions,
        files=files,
    )
