"""Synthetic authentication logs with injected red-team events.

Each user has a fixed behavioural profile: a preferred source PC, a handful
of usual destinations drawn with Zipf weights, and personal mixes of
authentication, logon and orientation types. Benign lines sample from the
profile. Red lines use machines outside the user's profile, often together with
authentication and logon types that benign users never produce, mimicking
lateral movement with stolen credentials.
"""

from __future__ import annotations

import configparser
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterator

import numpy as np

from .tokenizer import SECONDS_PER_DAY, RawEvent, format_line

AUTH_TYPES = ("Kerberos", "Negotiate", "?")
LOGON_TYPES = ("Network", "Interactive", "Batch", "Unlock", "Service")
ORIENTATIONS = ("LogOn", "LogOff", "TGS", "TGT")
OUTCOMES = ("Success", "Fail")
RED_AUTH_TYPES = ("NTLM", "MICROSOFT_AUTHENTICATION_PACKAGE_V1_0")
RED_LOGON_TYPES = ("RemoteInteractive", "NewCredentials")
SERVICE_ACCOUNTS = ("SYSTEM", "LOCAL SERVICE", "NETWORK SERVICE")

# base mixes; each user gets a Dirichlet perturbation of these
_AUTH_MIX = (0.7, 0.2, 0.1)
_LOGON_MIX = (0.7, 0.12, 0.08, 0.05, 0.05)
_ORIENT_MIX = (0.5, 0.3, 0.15, 0.05)


class GenConfigError(ValueError):
    pass


@dataclass(frozen=True)
class GenConfig:
    n_users: int = 50
    n_pcs: int = 200
    n_days: int = 2
    lines_per_day: int = 5000
    red_count_per_day: int = 25
    first_red_day: int = 1
    seed: int = 0
    preferred_src_prob: float = 0.9
    n_destinations: int = 5
    zipf_exponent: float = 1.0
    same_user_prob: float = 0.9
    failure_prob: float = 0.02
    profile_concentration: float = 50.0
    red_fail_prob: float = 0.1
    red_rare_type_prob: float = 0.5
    n_domains: int = 2

    def __post_init__(self):
        if self.n_users < 1 or self.n_days < 1 or self.lines_per_day < 1:
            raise GenConfigError("n_users, n_days and lines_per_day must be positive")
        if not 0 <= self.red_count_per_day <= self.lines_per_day:
            raise GenConfigError("red_count_per_day must lie in [0, lines_per_day]")
        # a red line needs two PCs outside the user's profile
        if self.n_pcs < self.n_destinations + 5:
            raise GenConfigError("n_pcs too small for the profile size")
        if not 0 < self.preferred_src_prob <= 1:
            raise GenConfigError("preferred_src_prob must lie in (0, 1]")

    @classmethod
    def from_mapping(cls, values: dict) -> "GenConfig":
        known = {f.name: f.type for f in fields(cls)}
        unknown = set(values) - set(known)
        if unknown:
            raise GenConfigError(f"unknown generator keys: {sorted(unknown)}")
        kw = {}
        for k, v in values.items():
            kind = int if known[k] == "int" else float
            try:
                kw[k] = kind(v)
            except ValueError:
                raise GenConfigError(f"{k}: cannot parse {v!r}") from None
        return cls(**kw)

    @classmethod
    def from_file(cls, path) -> "GenConfig":
        parser = configparser.ConfigParser()
        text = Path(path).read_text()
        if not text.lstrip().startswith("["):
            text = "[synth]\n" + text
        parser.read_string(text)
        section = parser["synth"] if parser.has_section("synth") else parser[parser.sections()[0]]
        return cls.from_mapping(dict(section))

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class UserProfile:
    name: str
    domain: str
    src_pcs: tuple[str, ...]          # preferred first
    destinations: tuple[str, ...]
    dst_weights: tuple[float, ...]
    auth: tuple[float, ...]
    logon: tuple[float, ...]
    orient: tuple[float, ...]

    @property
    def account(self) -> str:
        return f"{self.name}@{self.domain}"

    @property
    def machines(self) -> frozenset[str]:
        return frozenset(self.src_pcs) | frozenset(self.destinations)


def _pc(k: int) -> str:
    return f"C{k}"


def build_profiles(cfg: GenConfig) -> list[UserProfile]:
    rng = np.random.default_rng([cfg.seed, 0])
    ids = rng.choice(np.arange(100, 100 + 50 * cfg.n_users), cfg.n_users, replace=False)
    ranks = np.arange(1, cfg.n_destinations + 1, dtype=float)
    zipf = ranks ** -cfg.zipf_exponent
    zipf /= zipf.sum()
    alpha = cfg.profile_concentration
    profiles = []
    for uid in ids:
        pcs = rng.choice(cfg.n_pcs, 3 + cfg.n_destinations - 1, replace=False)
        src = tuple(_pc(int(p)) for p in pcs[:3])
        # local logons to the preferred PC are the most frequent destination
        dests = (src[0],) + tuple(_pc(int(p)) for p in pcs[3:])
        profiles.append(UserProfile(
            name=f"U{int(uid)}",
            domain=f"DOM{1 + int(rng.integers(cfg.n_domains))}",
            src_pcs=src,
            destinations=dests,
            dst_weights=tuple(zipf),
            auth=tuple(rng.dirichlet(alpha * np.array(_AUTH_MIX))),
            logon=tuple(rng.dirichlet(alpha * np.array(_LOGON_MIX))),
            orient=tuple(rng.dirichlet(alpha * np.array(_ORIENT_MIX))),
        ))
    return profiles


def _src_probs(cfg: GenConfig, p: UserProfile) -> dict[str, float]:
    rest = (1.0 - cfg.preferred_src_prob) / (len(p.src_pcs) - 1)
    return {pc: (cfg.preferred_src_prob if i == 0 else rest) for i, pc in enumerate(p.src_pcs)}


def _dst_user(cfg: GenConfig, p: UserProfile, rng) -> str:
    if rng.random() < cfg.same_user_prob:
        return p.account
    return f"{SERVICE_ACCOUNTS[int(rng.integers(len(SERVICE_ACCOUNTS)))]}@NT AUTHORITY"


def benign_event(cfg: GenConfig, p: UserProfile, seconds: int, rng) -> RawEvent:
    src_probs = _src_probs(cfg, p)
    src = p.src_pcs[rng.choice(len(p.src_pcs), p=list(src_probs.values()))]
    dst = p.destinations[rng.choice(len(p.destinations), p=p.dst_weights)]
    return RawEvent(seconds, (
        p.account,
        _dst_user(cfg, p, rng),
        src,
        dst,
        AUTH_TYPES[rng.choice(len(AUTH_TYPES), p=p.auth)],
        LOGON_TYPES[rng.choice(len(LOGON_TYPES), p=p.logon)],
        ORIENTATIONS[rng.choice(len(ORIENTATIONS), p=p.orient)],
        "Fail" if rng.random() < cfg.failure_prob else "Success",
    ))


def red_event(cfg: GenConfig, p: UserProfile, seconds: int, rng) -> RawEvent:
    outside = [k for k in range(cfg.n_pcs) if _pc(k) not in p.machines]
    src, dst = rng.choice(outside, 2, replace=False)
    rare = cfg.red_rare_type_prob
    auth = (RED_AUTH_TYPES[int(rng.integers(len(RED_AUTH_TYPES)))] if rng.random() < rare
            else AUTH_TYPES[rng.choice(len(AUTH_TYPES), p=p.auth)])
    logon = (RED_LOGON_TYPES[int(rng.integers(len(RED_LOGON_TYPES)))] if rng.random() < rare
             else LOGON_TYPES[rng.choice(len(LOGON_TYPES), p=p.logon)])
    return RawEvent(seconds, (
        p.account,
        p.account,
        _pc(int(src)),
        _pc(int(dst)),
        auth,
        logon,
        "LogOn",
        "Fail" if rng.random() < cfg.red_fail_prob else "Success",
    ), red=True)


def generate_day(cfg: GenConfig, day: int, profiles: list[UserProfile] | None = None) -> list[RawEvent]:
    """One day's events sorted by time. Depends only on (cfg, day)."""
    profiles = profiles or build_profiles(cfg)
    rng = np.random.default_rng([cfg.seed, 1, day])
    n = cfg.lines_per_day
    times = np.sort(rng.integers(day * SECONDS_PER_DAY, (day + 1) * SECONDS_PER_DAY, size=n))
    n_red = cfg.red_count_per_day if day >= cfg.first_red_day else 0
    red_at = set(rng.choice(n, n_red, replace=False).tolist()) if n_red else set()
    users = rng.integers(len(profiles), size=n)
    return [
        (red_event if i in red_at else benign_event)(cfg, profiles[users[i]], int(times[i]), rng)
        for i in range(n)
    ]


def generate(cfg: GenConfig) -> Iterator[RawEvent]:
    """All days in time order, generated lazily one day at a time."""
    profiles = build_profiles(cfg)
    for day in range(cfg.n_days):
        yield from generate_day(cfg, day, profiles)


def profile_loglik(cfg: GenConfig, profiles: list[UserProfile], event: RawEvent, floor: float = 1e-6) -> float:
    """Log-likelihood of an event under its user's benign profile.

    Values the profile cannot produce get probability ``floor``.
    """
    by_account = {p.account: p for p in profiles}
    p = by_account.get(event.user)
    if p is None:
        return 8 * math.log(floor)
    src_user, dst_user, src, dst, auth, logon, orient, outcome = event.fields
    dst_p = dict(zip(p.destinations, p.dst_weights))
    terms = [
        1.0,
        cfg.same_user_prob if dst_user == p.account
        else (1 - cfg.same_user_prob) / len(SERVICE_ACCOUNTS)
        if dst_user.partition("@")[0] in SERVICE_ACCOUNTS else 0.0,
        _src_probs(cfg, p).get(src, 0.0),
        dst_p.get(dst, 0.0),
        dict(zip(AUTH_TYPES, p.auth)).get(auth, 0.0),
        dict(zip(LOGON_TYPES, p.logon)).get(logon, 0.0),
        dict(zip(ORIENTATIONS, p.orient)).get(orient, 0.0),
        {"Success": 1 - cfg.failure_prob, "Fail": cfg.failure_prob}.get(outcome, 0.0),
    ]
    return float(sum(math.log(max(t, floor)) for t in terms))


def emit_lanl_format(events, out_dir, auth_name: str = "auth.txt", red_name: str = "redteam.txt") -> tuple[Path, Path]:
    """Write comma-separated auth lines and the red-team key file."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    auth_path, red_path = out / auth_name, out / red_name
    with open(auth_path, "w") as fa, open(red_path, "w") as fr:
        for e in events:
            fa.write(format_line(e) + "\n")
            if e.red:
                fr.write(",".join(map(str, e.red_key)) + "\n")
    return auth_path, red_path
