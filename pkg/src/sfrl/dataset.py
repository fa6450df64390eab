"""Transition / episode / dataset model and the ORLD v1 line-delimited format.

An ORLD file is UTF-8 text. Line 1 is a JSON header carrying the EnvSpec and a
free-text provenance string; every following line is one transition record::

    {"orld":1,"env_id":"chain:n=5","state_kind":"discrete:5",
     "action_kind":"discrete:2","horizon":20,"provenance":"..."}
    {"ep":0,"t":0,"s":0,"a":1,"r":0.0,"s2":1,"term":false,"tout":false}

Episode boundaries are implied by ``ep``; ``t`` restarts at 0 for every episode.
Reals are written with ``repr`` (shortest round-trippable decimal), so
``load_dataset(save_dataset(d)) == d`` bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence, Union

import numpy as np

Payload = Union[int, tuple]

KINDS = ("discrete", "continuous")
ORLD_VERSION = 1
TRUNCATED_TAIL = "truncated-tail"


class DatasetError(ValueError):
    """Raised for malformed datasets or files; ``locator`` pinpoints the record."""

    def __init__(self, message: str, locator: str | None = None):
        super().__init__(f"{locator}: {message}" if locator else message)
        self.locator = locator


def _coerce_payload(x) -> Payload:
    if isinstance(x, bool):
        raise TypeError("boolean is not a valid state/action payload")
    if isinstance(x, int):
        return x
    if isinstance(x, np.integer):
        return int(x)
    return tuple(float(v) for v in x)


@dataclass(frozen=True)
class EnvSpec:
    env_id: str
    state_kind: str
    state_size: int
    action_kind: str
    action_size: int
    horizon: int

    def __post_init__(self):
        for kind in (self.state_kind, self.action_kind):
            if kind not in KINDS:
                raise ValueError(f"unknown payload kind {kind!r}")
        if self.state_size < 1 or self.action_size < 1:
            raise ValueError("cardinalities/dimensions must be >= 1")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def is_discrete(self) -> bool:
        return self.state_kind == "discrete" and self.action_kind == "discrete"

    def header_fields(self) -> dict:
        return {
            "env_id": self.env_id,
            "state_kind": f"{self.state_kind}:{self.state_size}",
            "action_kind": f"{self.action_kind}:{self.action_size}",
            "horizon": self.horizon,
        }


@dataclass(frozen=True)
class Transition:
    state: Payload
    action: Payload
    reward: float
    next_state: Payload
    terminal: bool = False
    timeout: bool = False

    def __post_init__(self):
        object.__setattr__(self, "state", _coerce_payload(self.state))
        object.__setattr__(self, "action", _coerce_payload(self.action))
        object.__setattr__(self, "next_state", _coerce_payload(self.next_state))
        object.__setattr__(self, "reward", float(self.reward))
        object.__setattr__(self, "terminal", bool(self.terminal))
        object.__setattr__(self, "timeout", bool(self.timeout))

    @property
    def ends_episode(self) -> bool:
        return self.terminal or self.timeout


@dataclass(frozen=True)
class Episode:
    transitions: tuple[Transition, ...]
    index: int = 0

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))

    def __len__(self) -> int:
        return len(self.transitions)

    def __iter__(self) -> Iterator[Transition]:
        return iter(self.transitions)

    @property
    def rewards(self) -> list[float]:
        return [tr.reward for tr in self.transitions]


@dataclass(frozen=True)
class Dataset:
    episodes: tuple[Episode, ...]
    env_spec: EnvSpec
    provenance: str = ""

    def __post_init__(self):
        object.__setattr__(self, "episodes", tuple(self.episodes))

    def __len__(self) -> int:
        return len(self.episodes)

    @property
    def n_transitions(self) -> int:
        return sum(len(e) for e in self.episodes)

    def transitions(self) -> Iterator[Transition]:
        for ep in self.episodes:
            yield from ep.transitions


# -- provenance ---------------------------------------------------------------


def provenance_dict(text: str) -> dict:
    """Parse provenance text as a JSON object, wrapping free text otherwise."""
    if not text:
        return {}
    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        return {"note": text}
    return obj if isinstance(obj, dict) else {"note": text}


def provenance_text(fields: dict) -> str:
    return json.dumps(fields, sort_keys=True, separators=(",", ":"))


# -- segmentation -------------------------------------------------------------


def _payload_shape(x: Payload) -> tuple[str, int | None]:
    if isinstance(x, int):
        return ("discrete", None)
    return ("continuous", len(x))


def segment_episodes(
    log: Iterable[Transition],
    env_spec: EnvSpec | None = None,
    provenance: str = "",
) -> Dataset:
    """Split a flat transition log into episodes.

    A new episode starts right after every transition flagged terminal or
    timeout. A trailing run without a final flag is kept as its own episode
    and the dataset provenance is tagged ``truncated-tail``.

    If ``env_spec`` is omitted it is inferred from the log (discrete
    cardinalities from the largest id, horizon from the longest episode).
    """
    log = list(log)
    expected = None
    if env_spec is not None:
        expected = {
            "state": (env_spec.state_kind, None if env_spec.state_kind == "discrete" else env_spec.state_size),
            "action": (env_spec.action_kind, None if env_spec.action_kind == "discrete" else env_spec.action_size),
        }
    episodes: list[Episode] = []
    current: list[Transition] = []
    for i, tr in enumerate(log):
        shapes = {
            "state": _payload_shape(tr.state),
            "next_state": _payload_shape(tr.next_state),
            "action": _payload_shape(tr.action),
        }
        if expected is None:
            expected = {"state": shapes["state"], "action": shapes["action"]}
        for name, shape in shapes.items():
            want = expected["action" if name == "action" else "state"]
            if shape != want:
                raise DatasetError(
                    f"{name} arity {shape} does not match {want}", f"record {i}"
                )
        if tr.terminal and tr.timeout:
            raise DatasetError("terminal and timeout are both set", f"record {i}")
        current.append(tr)
        if tr.ends_episode:
            episodes.append(Episode(tuple(current), len(episodes)))
            current = []

    fields = provenance_dict(provenance)
    if current:
        episodes.append(Episode(tuple(current), len(episodes)))
        fields.setdefault("flags", []).append(TRUNCATED_TAIL)
        fields["truncated_tail_episode"] = len(episodes) - 1
        provenance = provenance_text(fields)

    if env_spec is None:
        env_spec = _infer_spec(log, episodes)
    return Dataset(tuple(episodes), env_spec, provenance)


def _infer_spec(log: Sequence[Transition], episodes: Sequence[Episode]) -> EnvSpec:
    if not log:
        return EnvSpec("unknown", "discrete", 1, "discrete", 1, 1)
    first = log[0]

    def kind_and_size(values, sample):
        if isinstance(sample, int):
            return "discrete", max(values) + 1
        return "continuous", len(sample)

    s_kind, s_size = kind_and_size(
        [t.state for t in log] + [t.next_state for t in log], first.state
    )
    a_kind, a_size = kind_and_size([t.action for t in log], first.action)
    horizon = max(len(e) for e in episodes)
    return EnvSpec("unknown", s_kind, s_size, a_kind, a_size, horizon)


# -- validation ---------------------------------------------------------------

CHECKS = (
    "non_empty_episode",
    "episode_index",
    "arity",
    "finite",
    "flag_exclusive",
    "flag_position",
    "chain",
)


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    locator: str | None = None
    detail: str | None = None


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    @property
    def failures(self) -> list[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def __getitem__(self, name: str) -> CheckResult:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def summary(self) -> str:
        lines = []
        for c in self.checks:
            status = "pass" if c.passed else f"FAIL at {c.locator}: {c.detail}"
            lines.append(f"{c.name}: {status}")
        return "\n".join(lines)


def _payload_ok(x, kind: str, size: int) -> bool:
    if kind == "discrete":
        return isinstance(x, int) and 0 <= x < size
    return isinstance(x, tuple) and len(x) == size and all(math.isfinite(v) for v in x)


def validate_dataset(d: Dataset) -> ValidationReport:
    """Check every dataset invariant; report the first offender per check."""
    spec = d.env_spec
    first: dict[str, tuple[str, str]] = {}

    def fail(name, locator, detail):
        first.setdefault(name, (locator, detail))

    for pos, ep in enumerate(d.episodes):
        if ep.index != pos:
            fail("episode_index", f"episode {pos}", f"stored index {ep.index} != position {pos}")
        if len(ep) == 0:
            fail("non_empty_episode", f"episode {pos}", "episode has no transitions")
            continue
        last = len(ep) - 1
        for j, tr in enumerate(ep.transitions):
            loc = f"episode {pos} step {j}"
            if not (
                _payload_ok(tr.state, spec.state_kind, spec.state_size)
                and _payload_ok(tr.next_state, spec.state_kind, spec.state_size)
                and _payload_ok(tr.action, spec.action_kind, spec.action_size)
            ):
                fail("arity", loc, "state/action payload does not match env spec")
            if not math.isfinite(tr.reward):
                fail("finite", loc, f"reward {tr.reward!r} is not finite")
            if tr.terminal and tr.timeout:
                fail("flag_exclusive", loc, "terminal and timeout both set")
            if j < last and tr.ends_episode:
                fail("flag_position", loc, "terminal/timeout flag before the final transition")
            if j < last and tr.next_state != ep.transitions[j + 1].state:
                fail("chain", loc, "next_state does not match the following state")

    checks = []
    for name in CHECKS:
        if name in first:
            loc, detail = first[name]
            checks.append(CheckResult(name, False, loc, detail))
        else:
            checks.append(CheckResult(name, True))
    return ValidationReport(tuple(checks))


# -- ORLD v1 serialization ----------------------------------------------------


def _dump(obj) -> str:
    return json.dumps(obj, separators=(",", ":"), allow_nan=False, ensure_ascii=False)


def _encode_payload(x: Payload):
    return x if isinstance(x, int) else list(x)


def dataset_to_text(d: Dataset) -> str:
    header = {"orld": ORLD_VERSION, **d.env_spec.header_fields(), "provenance": d.provenance}
    lines = [_dump(header)]
    for ep in d.episodes:
        for t, tr in enumerate(ep.transitions):
            lines.append(
                _dump(
                    {
                        "ep": ep.index,
                        "t": t,
                        "s": _encode_payload(tr.state),
                        "a": _encode_payload(tr.action),
                        "r": tr.reward,
                        "s2": _encode_payload(tr.next_state),
                        "term": tr.terminal,
                        "tout": tr.timeout,
                    }
                )
            )
    return "\n".join(lines) + "\n"


def fingerprint(d: Dataset) -> str:
    """Short content hash used as a dataset id in provenance and model headers."""
    return hashlib.sha256(dataset_to_text(d).encode("utf-8")).hexdigest()[:16]


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_dataset(d: Dataset, path: str | os.PathLike) -> None:
    report = validate_dataset(d)
    if not report.ok:
        bad = report.failures[0]
        raise DatasetError(f"invariant {bad.name!r} violated: {bad.detail}", bad.locator)
    atomic_write_text(path, dataset_to_text(d))


def _parse_kind(value, where: str) -> tuple[str, int]:
    try:
        kind, size = str(value).split(":")
        size = int(size)
    except ValueError:
        raise DatasetError(f"bad kind declaration {value!r}", where) from None
    if kind not in KINDS or size < 1:
        raise DatasetError(f"bad kind declaration {value!r}", where)
    return kind, size


def _decode_payload(x, kind: str, where: str) -> Payload:
    if kind == "discrete":
        if isinstance(x, bool) or not isinstance(x, int):
            raise DatasetError(f"expected integer id, got {x!r}", where)
        return x
    if not isinstance(x, list) or not all(
        isinstance(v, (int, float)) and not isinstance(v, bool) for v in x
    ):
        raise DatasetError(f"expected real vector, got {x!r}", where)
    return tuple(float(v) for v in x)


def dataset_from_text(text: str, source: str = "<text>") -> Dataset:
    # records are LF-delimited; str.splitlines would also break on U+0085 and
    # U+2028 inside strings, which json.dumps(ensure_ascii=False) leaves raw
    lines = text.split("\n")
    if not text.strip():
        raise DatasetError("empty file, missing header", f"{source}:1")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"header is not JSON ({exc.msg})", f"{source}:1") from None
    if not isinstance(header, dict) or header.get("orld") != ORLD_VERSION:
        raise DatasetError("not an ORLD v1 header", f"{source}:1")
    try:
        s_kind, s_size = _parse_kind(header["state_kind"], f"{source}:1")
        a_kind, a_size = _parse_kind(header["action_kind"], f"{source}:1")
        spec = EnvSpec(str(header["env_id"]), s_kind, s_size, a_kind, a_size, int(header["horizon"]))
        provenance = header.get("provenance", "")
    except KeyError as exc:
        raise DatasetError(f"header missing field {exc.args[0]!r}", f"{source}:1") from None
    except (TypeError, ValueError) as exc:
        if isinstance(exc, DatasetError):
            raise
        raise DatasetError(f"bad header ({exc})", f"{source}:1") from None
    if not isinstance(provenance, str):
        raise DatasetError("provenance must be a string", f"{source}:1")

    episodes: list[Episode] = []
    current: list[Transition] = []
    cur_ep, expect_t = -1, 0
    for lineno, line in enumerate(lines[1:], start=2):
        where = f"{source}:{lineno}"
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"record is not JSON ({exc.msg})", where) from None
        if not isinstance(rec, dict):
            raise DatasetError("record is not a JSON object", where)
        missing = {"ep", "t", "s", "a", "r", "s2", "term", "tout"} - rec.keys()
        if missing:
            raise DatasetError(f"record missing fields {sorted(missing)}", where)
        ep, t = rec["ep"], rec["t"]
        if ep == cur_ep + 1:
            if current:
                episodes.append(Episode(tuple(current), cur_ep))
            current, cur_ep, expect_t = [], ep, 0
        elif ep != cur_ep:
            raise DatasetError(f"episode index {ep!r} out of sequence (expected {cur_ep} or {cur_ep + 1})", where)
        if t != expect_t:
            raise DatasetError(f"step index {t!r} out of sequence (expected {expect_t})", where)
        expect_t += 1
        r = rec["r"]
        if isinstance(r, bool) or not isinstance(r, (int, float)):
            raise DatasetError(f"reward {r!r} is not a number", where)
        if not isinstance(rec["term"], bool) or not isinstance(rec["tout"], bool):
            raise DatasetError("term/tout must be booleans", where)
        current.append(
            Transition(
                _decode_payload(rec["s"], s_kind, where),
                _decode_payload(rec["a"], a_kind, where),
                float(r),
                _decode_payload(rec["s2"], s_kind, where),
                rec["term"],
                rec["tout"],
            )
        )
    if current:
        episodes.append(Episode(tuple(current), cur_ep))

    d = Dataset(tuple(episodes), spec, provenance)
    report = validate_dataset(d)
    if not report.ok:
        bad = report.failures[0]
        raise DatasetError(
            f"invariant {bad.name!r} violated: {bad.detail}", f"{source}: {bad.locator}"
        )
    return d


def load_dataset(path: str | os.PathLike) -> Dataset:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise DatasetError(f"not UTF-8 text ({exc.reason})", str(path)) from None
    return dataset_from_text(text, source=str(path))
