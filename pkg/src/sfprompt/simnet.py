"""In-process transport accounting: exact byte ledger and a virtual clock.

Transfer time is payload/(rate/active_clients) when the link is shared by the
active clients of a round, else payload/rate. Compute time is work/power.
Every message also carries a fixed header, counted separately from payload so
that measured traffic can be compared against the analytic communication
formulas, which count payload only.
"""

from __future__ import annotations

from dataclasses import dataclass, field

HEADER_BYTES = 32

UP = "up"
DOWN = "down"


@dataclass(frozen=True)
class LinkConfig:
    uplink_rate: float   # bytes/second
    downlink_rate: float
    concurrent_share: bool = True

    def __post_init__(self):
        if self.uplink_rate <= 0 or self.downlink_rate <= 0:
            raise ValueError("link rates must be > 0")

    def rate(self, direction: str) -> float:
        if direction == UP:
            return self.uplink_rate
        if direction == DOWN:
            return self.downlink_rate
        raise ValueError(f"direction must be {UP!r} or {DOWN!r}, got {direction!r}")


class ClosedRoundError(RuntimeError):
    pass


class TrafficLedger:
    """Per-round, per-direction, per-message-kind byte totals. Monotone within a round."""

    def __init__(self, header_bytes: int = HEADER_BYTES):
        self.header_bytes = header_bytes
        self._payload: dict[int, dict[str, dict[str, int]]] = {}
        self._headers: dict[int, dict[str, int]] = {}
        self._messages: dict[int, int] = {}
        self._closed: set[int] = set()

    def record(self, round_: int, direction: str, kind: str, payload_bytes: int) -> None:
        if payload_bytes < 0:
            raise ValueError(f"payload_bytes must be >= 0, got {payload_bytes}")
        if round_ in self._closed:
            raise ClosedRoundError(f"round {round_} already closed")
        if direction not in (UP, DOWN):
            raise ValueError(f"direction must be {UP!r} or {DOWN!r}, got {direction!r}")
        per_dir = self._payload.setdefault(round_, {UP: {}, DOWN: {}})
        per_dir[direction][kind] = per_dir[direction].get(kind, 0) + int(payload_bytes)
        hdr = self._headers.setdefault(round_, {UP: 0, DOWN: 0})
        hdr[direction] += self.header_bytes
        self._messages[round_] = self._messages.get(round_, 0) + 1

    def payload_bytes(self, round_: int, direction: str | None = None, kind: str | None = None) -> int:
        per_dir = self._payload.get(round_, {UP: {}, DOWN: {}})
        dirs = [direction] if direction else [UP, DOWN]
        total = 0
        for d in dirs:
            kinds = per_dir.get(d, {})
            total += kinds.get(kind, 0) if kind else sum(kinds.values())
        return total

    def header_bytes_total(self, round_: int, direction: str | None = None) -> int:
        hdr = self._headers.get(round_, {UP: 0, DOWN: 0})
        return hdr[direction] if direction else hdr[UP] + hdr[DOWN]

    def message_count(self, round_: int) -> int:
        return self._messages.get(round_, 0)

    def close_round(self, round_: int) -> None:
        self._closed.add(round_)

    def is_closed(self, round_: int) -> bool:
        return round_ in self._closed

    def rounds(self) -> list[int]:
        return sorted(self._payload)


class SimClock:
    """Virtual per-actor time. Round latency defaults to the serial sum of all
    recorded events; the orchestrator overrides it with the pipelined value."""

    def __init__(self):
        self._actor_elapsed: dict[str, float] = {}
        self._round_serial: dict[int, float] = {}
        self._round_latency: dict[int, float] = {}
        self._closed: set[int] = set()

    def add(self, round_: int, actor: str, seconds: float) -> None:
        if round_ in self._closed:
            raise ClosedRoundError(f"round {round_} already closed")
        self._actor_elapsed[actor] = self._actor_elapsed.get(actor, 0.0) + seconds
        self._round_serial[round_] = self._round_serial.get(round_, 0.0) + seconds

    def actor_elapsed(self, actor: str) -> float:
        return self._actor_elapsed.get(actor, 0.0)

    def set_round_latency(self, round_: int, seconds: float) -> None:
        if round_ in self._closed:
            raise ClosedRoundError(f"round {round_} already closed")
        if seconds < 0:
            raise ValueError("round latency must be >= 0")
        self._round_latency[round_] = seconds

    def round_latency(self, round_: int) -> float:
        return self._round_latency.get(round_, self._round_serial.get(round_, 0.0))

    def close_round(self, round_: int) -> None:
        self._closed.add(round_)


def record_transfer(
    ledger: TrafficLedger,
    clock: SimClock,
    link: LinkConfig,
    round_: int,
    direction: str,
    kind: str,
    payload_bytes: int,
    active_clients: int = 1,
    actor: str = "net",
) -> float:
    """Account one message; returns the transfer seconds for the payload."""
    ledger.record(round_, direction, kind, payload_bytes)
    rate = link.rate(direction)
    if link.concurrent_share and active_clients > 1:
        rate = rate / active_clients
    seconds = payload_bytes / rate
    clock.add(round_, actor, seconds)
    return seconds


def record_compute(
    clock: SimClock, round_: int, actor: str, work_units: float, power_units_per_s: float
) -> float:
    if power_units_per_s <= 0:
        raise ValueError(f"power must be > 0, got {power_units_per_s}")
    seconds = work_units / power_units_per_s
    clock.add(round_, actor, seconds)
    return seconds


@dataclass
class RoundTotals:
    bytes_up: int
    bytes_down: int
    latency_s: float


def round_summary(ledger: TrafficLedger, clock: SimClock, round_: int) -> RoundTotals:
    """Immutable payload-byte totals and latency for a closed round."""
    if not ledger.is_closed(round_):
        raise ValueError(f"round {round_} is not closed yet")
    return RoundTotals(
        bytes_up=ledger.payload_bytes(round_, UP),
        bytes_down=ledger.payload_bytes(round_, DOWN),
        latency_s=clock.round_latency(round_),
    )


@dataclass
class RoundPipeline:
    """Per-selected-client timing buckets for one round, in seconds.

    Lists are aligned by client. The server bucket is summed (one server
    services every client); client buckets run in parallel, so they enter the
    composition through a max.
    """

    dist_s: list[float] = field(default_factory=list)        # model distribution, downlink
    client_pre_s: list[float] = field(default_factory=list)  # scoring pass + head forward
    up_smashed_s: list[float] = field(default_factory=list)
    local_update_s: list[float] = field(default_factory=list)  # self-update epochs
    server_s: list[float] = field(default_factory=list)        # body forward + backward
    client_tail_s: list[float] = field(default_factory=list)   # tail pass + prompt update
    mid_transfer_s: list[float] = field(default_factory=list)  # smashed' down, grads up, grads down
    upload_s: list[float] = field(default_factory=list)


def _mx(xs: list[float]) -> float:
    return max(xs) if xs else 0.0


def pipelined_round_latency(p: RoundPipeline) -> float:
    """Round wall time with the client self-update overlapping the server leg.

    serial prefix (distribution, client preprocessing, smashed uplink), then
    max(client self-update work, server work + tail work + remaining transfers),
    then the upload.
    """
    pre = _mx(p.dist_s) + _mx(p.client_pre_s) + _mx(p.up_smashed_s)
    server_leg = sum(p.server_s) + _mx(p.client_tail_s) + _mx(p.mid_transfer_s)
    mid = max(_mx(p.local_update_s), server_leg)
    return pre + mid + _mx(p.upload_s)
