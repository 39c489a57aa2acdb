"""Deterministic fixed-step world: clock, lossy V2V bus, longitudinal kinematics
and a JSON Lines trace.

Every tick at time ``t`` runs, in this order: message deliveries, timer
expiry, scripted LLI decisions, arrival checks, then physics from ``t`` to
``t + dt``.  Ties inside a phase are broken by sequence number or vehicle id,
so a run is a pure function of (scenario, config, seed, faults).
"""
from __future__ import annotations

import dataclasses
import heapq
import json
import math
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

from .core import RS, IdleState, Message, VehicleId, is_stable
from .mdl import Behaviours, Registry, compile_registry
from .runtime import (
    AgentConfig,
    ClearTarget,
    Effect,
    InitiationError,
    Note,
    PlatoonInfo,
    Detach,
    PlatoonUpdate,
    Send,
    SetTarget,
    VehicleAgent,
)


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class SimConfig:
    dt: float = 0.1
    latency: float = 0.1
    drop: float = 0.0
    d: float = 6.0
    D: float = 30.0
    v_free: float = 20.0
    a_max: float = 2.0
    b_max: float = 3.0
    arrival_tolerance: float = 0.5
    speed_tolerance: float = 0.5
    max_platoon_size: int = 8
    t_max: float = 600.0
    # gap and relative-speed gains of the speed controller; with these values
    # the closed loop is critically damped
    k_gap: float = 0.25
    k_speed: float = 1.0
    min_gap: float = 2.0
    default_timeout: float = 30.0
    idle_timeout: float = 120.0
    policy: str = "default"
    sample_every: float = 1.0

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        if not 0.0 <= self.drop <= 1.0:
            raise ValueError("drop must lie in [0, 1]")
        if not self.d < self.D:
            raise ValueError("intra-platoon gap d must be smaller than D")
        if self.latency < 0:
            raise ValueError("latency must not be negative")

    @classmethod
    def from_dict(cls, data: Mapping[str, Any], base: "SimConfig | None" = None) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return dataclasses.replace(base or cls(), **dict(data))

    def agent_config(self) -> AgentConfig:
        return AgentConfig(self.d, self.D, self.max_platoon_size, self.default_timeout, self.idle_timeout, self.policy)


@dataclass(frozen=True)
class Faults:
    """Single-point perturbations, indexed by order of occurrence in the run.

    ``drop`` lists indices of sent messages that are lost; ``expire`` lists
    indices of timed waits that expire one tick after they start.
    """

    drop: frozenset[int] = frozenset()
    expire: frozenset[int] = frozenset()

    @classmethod
    def none(cls) -> "Faults":
        return cls()


@dataclass
class Body:
    id: VehicleId
    lane: int
    s: float
    v: float
    obstacle: bool = False
    a: float = 0.0
    mtp: dict[str, Any] | None = None
    sh: dict[str, Any] | None = None
    watch: tuple[str, int] | None = None  # (kind, token) awaiting arrival
    fired: set[int] = field(default_factory=set)


@dataclass
class TraceRecord:
    t: float
    seq: int
    vehicle: str
    kind: str
    detail: dict[str, Any]

    def to_dict(self) -> dict[str, Any]:
        return {"t": self.t, "seq": self.seq, "vehicle": self.vehicle, "kind": self.kind, "detail": self.detail}


class Trace(list):
    """Ordered trace records."""

    def to_jsonl(self) -> str:
        return "".join(json.dumps(r.to_dict(), sort_keys=True, separators=(",", ":")) + "\n" for r in self)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    def of_kind(self, *kinds: str) -> list[TraceRecord]:
        return [r for r in self if r.kind in kinds]

    def messages(self, kind: str = "msg-sent") -> list[dict[str, Any]]:
        return [r.detail["message"] for r in self if r.kind == kind]


_NOTE_KINDS = {
    "primitive": ("primitive", None),
    "transition": ("transition", "sub"),
    "result": ("result", "sub"),
    "warning": ("warning", None),
    "step": ("transition", "manoeuvre"),
    "manoeuvre-start": ("transition", "manoeuvre"),
    "manoeuvre-result": ("result", "manoeuvre"),
    "request": ("transition", "lli"),
    "conform": ("transition", "conform"),
}


def load_scenario(source: str | Path | Mapping[str, Any]) -> dict[str, Any]:
    if isinstance(source, Mapping):
        data = dict(source)
    else:
        data = json.loads(Path(source).read_text())
    validate_scenario(data)
    return data


def validate_scenario(data: Mapping[str, Any]) -> None:
    if not isinstance(data.get("vehicles"), list) or not data["vehicles"]:
        raise ScenarioError("scenario needs a non-empty 'vehicles' list")
    ids = [v.get("id") for v in data["vehicles"]]
    if len(set(ids)) != len(ids) or not all(isinstance(i, str) for i in ids):
        raise ScenarioError("vehicle ids must be unique strings")
    for v in data["vehicles"]:
        for key in ("lane", "s", "v"):
            if not isinstance(v.get(key), (int, float)):
                raise ScenarioError(f"vehicle {v['id']} needs numeric '{key}'")
        if v.get("role", "FV") not in ("PL", "PF", "FV", "obstacle"):
            raise ScenarioError(f"vehicle {v['id']} has unknown role {v.get('role')}")
    seen: set[str] = set()
    for p in data.get("platoons", []):
        members = p.get("members", [])
        if not members or members[0] != p.get("leader"):
            raise ScenarioError("platoon members must start with the leader")
        if set(members) & seen or not set(members) <= set(ids):
            raise ScenarioError("platoon members must be known and belong to one platoon")
        seen |= set(members)
    for entry in data.get("script", []):
        if entry.get("vehicle") not in ids or "action" not in entry or not isinstance(entry.get("t"), (int, float)):
            raise ScenarioError(f"bad script entry {entry}")


class World:
    def __init__(
        self,
        scenario: Mapping[str, Any],
        config: SimConfig | None = None,
        seed: int = 0,
        registry: Registry | None = None,
        faults: Faults | None = None,
        behaviours: Behaviours | None = None,
    ):
        validate_scenario(scenario)
        self.scenario = scenario
        self.config = config or SimConfig()
        self.seed = seed
        self.faults = faults or Faults()
        self.rng = random.Random(seed)
        if behaviours is None:
            if registry is None:
                from .catalogue import builtin_registry

                registry = builtin_registry()
            behaviours = compile_registry(registry)
        self.behaviours = behaviours
        self.tick = 0
        self.trace = Trace()
        self._seq = 0
        self._msg_seq = 0
        self._timer_seq = 0
        self.messages_sent = 0
        self.timed_waits = 0
        self.bus: list[tuple[int, int, Message, VehicleId]] = []
        self.bodies: dict[VehicleId, Body] = {}
        self.agents: dict[VehicleId, VehicleAgent] = {}
        self.script = sorted(
            (dict(e, _i=i) for i, e in enumerate(scenario.get("script", []))), key=lambda e: (e["t"], e["_i"])
        )
        self.min_gap_seen = math.inf
        self.max_step_excess = 0.0
        self._setup()

    # ------------------------------------------------------------ setup

    def _setup(self) -> None:
        cfg = self.config
        roles: dict[VehicleId, IdleState] = {}
        platoon_of: dict[VehicleId, PlatoonInfo] = {}
        for p in self.scenario.get("platoons", []):
            info = PlatoonInfo(p["leader"], list(p["members"]), cfg.d, cfg.D)
            for i, m in enumerate(p["members"]):
                roles[m] = IdleState.PL if i == 0 else IdleState.PF
                platoon_of[m] = info
        for spec in self.scenario["vehicles"]:
            vid = spec["id"]
            body = Body(vid, int(spec["lane"]), float(spec["s"]), float(spec["v"]), spec.get("role") == "obstacle")
            self.bodies[vid] = body
            if body.obstacle:
                continue
            idle = roles.get(vid, IdleState(spec.get("role", "FV")))
            if spec.get("role") not in (None, idle.value):
                raise ScenarioError(f"vehicle {vid} role {spec.get('role')} contradicts platoon membership")
            info = platoon_of.get(vid)
            agent = VehicleAgent(vid, idle, self.behaviours,
                                 PlatoonInfo(info.leader, list(info.members), cfg.d, cfg.D) if info else None,
                                 cfg.agent_config(), body.lane)
            agent.timer_hook = self._timer_hook
            self.agents[vid] = agent
            if idle is IdleState.PF:
                body.sh = dict(spec.get("headway") or {"space": cfg.d})

    def _timer_hook(self, agent: VehicleAgent, key: tuple[str, str], deadline: float) -> float:
        index = self.timed_waits
        self.timed_waits += 1
        if index in self.faults.expire:
            self._record(agent.id, "warning", {"reason": "FORCED_TIMEOUT", "timer": list(key), "index": index})
            return round(self.now + self.config.dt, 9)
        return deadline

    # ------------------------------------------------------------ time and trace

    @property
    def now(self) -> float:
        return round(self.tick * self.config.dt, 9)

    def _ticks(self, seconds: float) -> int:
        return int(round(seconds / self.config.dt))

    def _record(self, vehicle: str, kind: str, detail: dict[str, Any]) -> None:
        self.trace.append(TraceRecord(self.now, self._seq, vehicle, kind, _jsonable(detail)))
        self._seq += 1

    # ------------------------------------------------------------ effects

    def apply(self, effects: Iterable[Effect]) -> None:
        for fx in effects:
            if isinstance(fx, Send):
                self.deliver(fx.message)
            elif isinstance(fx, SetTarget):
                body = self.bodies[fx.vehicle]
                params = dict(fx.params)
                if fx.kind == "MTP":
                    body.mtp = params
                else:
                    body.sh = params
                body.watch = (fx.kind, fx.token)
            elif isinstance(fx, ClearTarget):
                body = self.bodies[fx.vehicle]
                if fx.kind in ("MTP", "all"):
                    body.mtp = None
                if fx.kind in ("SH", "all"):
                    body.sh = None
            elif isinstance(fx, PlatoonUpdate):
                self._broadcast_platoon(fx)
            elif isinstance(fx, Detach):
                self._detach(fx.vehicle)
            elif isinstance(fx, Note):
                kind, scope = _NOTE_KINDS.get(fx.kind, ("warning", None))
                detail = dict(fx.detail)
                if scope is not None:
                    detail["scope"] = scope
                if fx.kind in ("step", "manoeuvre-start", "manoeuvre-result", "request", "conform"):
                    detail["event"] = fx.kind
                self._record(fx.vehicle, kind, detail)

    def _detach(self, vehicle: VehicleId) -> None:
        for vid in sorted(self.agents):
            members = self.agents[vid].platoon.members
            if self.agents[vid].idle is IdleState.PL and vehicle in members[1:]:
                i = members.index(vehicle)
                self.apply([PlatoonUpdate(vehicle, tuple(members[i:])), PlatoonUpdate(vid, tuple(members[:i]))])
                return

    def _broadcast_platoon(self, update: PlatoonUpdate) -> None:
        """Share platoon information with everyone it concerns.

        Platoon information travels over the periodic beacon rather than the
        manoeuvre messages, so it is neither delayed nor lost.  Reactions are
        collected first so that a follow-up update is not overwritten by the
        one that caused it.
        """
        members = list(update.members)
        follow_up: list[Effect] = []
        for vid in sorted(self.agents):
            agent = self.agents[vid]
            if vid in members or agent.platoon.leader == update.leader:
                follow_up.extend(agent.adopt_platoon(update.leader, members, self.now))
            elif agent.idle is IdleState.PL and set(agent.platoon.members[1:]) & set(members):
                # another leader claimed some of our followers
                rest = tuple(m for m in agent.platoon.members if m not in members)
                follow_up.append(PlatoonUpdate(vid, rest))
        self.apply(follow_up)

    def deliver(self, msg: Message) -> None:
        """Put ``msg`` on the bus, or lose it."""
        index = self.messages_sent
        self.messages_sent += 1
        detail = {"message": msg.to_dict(), "index": index}
        self._record(msg.sender, "msg-sent", detail)
        lost = self.rng.random() < self.config.drop
        if lost or index in self.faults.drop:
            self._record(msg.sender, "msg-dropped", detail)
            return
        due = self.tick + self._ticks(self.config.latency)
        for r in msg.receivers:
            heapq.heappush(self.bus, (due, self._msg_seq, msg, r))
            self._msg_seq += 1

    # ------------------------------------------------------------ phases

    def _deliveries(self) -> None:
        guard = 0
        while self.bus and self.bus[0][0] <= self.tick:
            _, _, msg, receiver = heapq.heappop(self.bus)
            self._record(receiver, "msg-delivered", {"message": msg.to_dict()})
            agent = self.agents.get(receiver)
            if agent is None:
                self._record(receiver, "warning", {"reason": "NO_SUCH_VEHICLE", "message": msg.label})
                continue
            self.apply(agent.handle_message(msg, self.now))
            guard += 1
            if guard > 100000:
                raise RuntimeError("message storm")

    def _timers(self) -> None:
        for vid in sorted(self.agents):
            agent = self.agents[vid]
            if agent.timers and min(agent.timers.values()) <= self.now + 1e-9:
                self.apply(agent.tick_timeouts(self.now))

    def _script(self) -> None:
        while self.script and self.script[0]["t"] <= self.now + 1e-9:
            entry = self.script.pop(0)
            agent = self.agents[entry["vehicle"]]
            try:
                if "request" in entry:
                    req = entry["request"]
                    bindings = dict(req.get("bindings") or {})
                    fx = agent.request(entry["action"], req["leader"], bindings, self.now)
                else:
                    fx = agent.initiate(entry["action"], dict(entry.get("bindings") or {}), self.now)
            except InitiationError as exc:
                self._record(agent.id, "warning", {"reason": exc.code, "action": entry["action"],
                                                   "message": str(exc)})
                continue
            self.apply(fx)

    def _arrivals(self) -> None:
        for vid in sorted(self.agents):
            ev = arrival_check(self, vid)
            if ev is not None:
                self._record(vid, "transition", {"event": "arrived", "scope": "physics",
                                                 "target": self.bodies[vid].watch[0], "token": ev})
                self.apply(self.agents[vid].handle_arrived(ev, self.now))

    def _sample(self) -> None:
        every = max(1, self._ticks(self.config.sample_every))
        if self.tick % every:
            return
        for vid in sorted(self.bodies):
            b = self.bodies[vid]
            self._record(vid, "physics-sample", {"lane": b.lane, "s": round(b.s, 3), "v": round(b.v, 3)})

    def quiescent(self) -> bool:
        return (
            not self.bus
            and not self.script
            and all(not a.timers and not a.busy for a in self.agents.values())
            and all(b.mtp is None or b.watch is None or b.watch[1] in b.fired for b in self.bodies.values())
        )

    def step(self) -> None:
        self._deliveries()
        self._timers()
        self._script()
        self._arrivals()
        self._sample()
        advance_physics(self, self.config.dt)
        self.tick += 1
        for vid, agent in self.agents.items():
            agent.lane = self.bodies[vid].lane

    def run(self) -> "RunResult":
        limit = self._ticks(self.config.t_max)
        while self.tick <= limit:
            if self.tick > 0 and self.quiescent():
                break
            self.step()
        quiet = self.quiescent()
        if not quiet:
            self._record("world", "warning", {"reason": "NON_QUIESCENT", "t_max": self.config.t_max})
        return RunResult(self.trace, quiet, self)

    # ------------------------------------------------------------ queries

    def same_lane_ahead(self, vid: VehicleId, lane: int | None = None) -> Body | None:
        me = self.bodies[vid]
        lane = me.lane if lane is None else lane
        best = None
        for b in self.bodies.values():
            if b.id != vid and b.lane == lane and (b.s > me.s or (b.s == me.s and b.id < vid)):
                if best is None or b.s < best.s:
                    best = b
        return best

    def same_lane_behind(self, vid: VehicleId, lane: int) -> Body | None:
        me = self.bodies[vid]
        best = None
        for b in self.bodies.values():
            if b.id != vid and b.lane == lane and b.s <= me.s:
                if best is None or b.s > best.s:
                    best = b
        return best

    def idle_states(self) -> dict[VehicleId, IdleState]:
        return {vid: a.idle for vid, a in sorted(self.agents.items())}

    def platoons(self) -> dict[VehicleId, list[VehicleId]]:
        return {vid: list(a.platoon.members) for vid, a in sorted(self.agents.items()) if a.idle is IdleState.PL}

    def consistency_errors(self) -> list[str]:
        """Disagreements between leaders' member lists and followers' leader pointers."""
        errs = []
        owner: dict[VehicleId, VehicleId] = {}
        for vid, a in sorted(self.agents.items()):
            if a.idle is not IdleState.PL:
                continue
            if not a.platoon.members or a.platoon.members[0] != vid or a.platoon.leader != vid:
                errs.append(f"{vid}: leader's own platoon info is inconsistent")
                continue
            for m in a.platoon.members[1:]:
                if m in owner:
                    errs.append(f"{m} is listed by both {owner[m]} and {vid}")
                owner[m] = vid
                other = self.agents.get(m)
                if other is None or other.idle is not IdleState.PF or other.platoon.leader != vid:
                    errs.append(f"{m} is listed by {vid} but is {other.idle if other else '?'} "
                                f"with leader {other.platoon.leader if other else '?'}")
        for vid, a in sorted(self.agents.items()):
            if a.idle is IdleState.PF and owner.get(vid) != a.platoon.leader:
                errs.append(f"{vid} follows {a.platoon.leader} which does not list it")
        return errs


# ---------------------------------------------------------------- physics

def _reference(world: World, vid: VehicleId) -> Body | None:
    """What a headway is judged against once the manoeuvre asks "arrived?".

    A vehicle listed in its platoon measures against its logical predecessor
    (none if it is listed first); a vehicle not yet listed measures against
    whatever is physically ahead.
    """
    agent = world.agents.get(vid)
    if agent is not None and vid in agent.platoon.members:
        pred = agent.platoon.predecessor(vid)
        if pred is None or pred not in world.bodies or world.bodies[pred].lane != world.bodies[vid].lane:
            return None
        return world.bodies[pred]
    return world.same_lane_ahead(vid)


def _clamp(x: float, lo: float, hi: float) -> float:
    return min(hi, max(lo, x))


def _desired_gap(sh: Mapping[str, Any], v: float) -> float:
    if sh.get("time") is not None:
        return float(sh["time"]) * v
    return float(sh["space"])


def advance_physics(world: World, dt: float) -> None:
    """Move every vehicle one step; accelerations are computed before any update."""
    cfg = world.config
    accel: dict[VehicleId, float] = {}
    for vid in sorted(world.bodies):
        b = world.bodies[vid]
        if b.obstacle:
            accel[vid] = 0.0
            continue
        ahead = world.same_lane_ahead(vid)
        a = 0.0
        regulated = None
        comfort = 0.5 * cfg.b_max
        if b.mtp is not None and b.mtp.get("target") in world.bodies:
            t = world.bodies[b.mtp["target"]]
            err = t.s + float(b.mtp.get("offset", 0.0)) - b.s
            a = _clamp(cfg.k_gap * err + cfg.k_speed * (t.v - b.v), -comfort, cfg.a_max)
            if t.lane == b.lane:
                regulated = t.id
        elif b.sh is not None and ahead is not None:
            # cooperative following: the predecessor's acceleration is known
            # over V2V and fed forward
            pd = cfg.k_gap * (ahead.s - b.s - _desired_gap(b.sh, b.v)) + cfg.k_speed * (ahead.v - b.v)
            a = ahead.a + _clamp(pd, -comfort, cfg.a_max)
            regulated = ahead.id
        if ahead is not None and ahead.id != regulated:
            # keep a safe distance to whatever is physically in front
            safe = cfg.min_gap + 0.5 * b.v
            gap = ahead.s - b.s
            if gap < safe + 2 * cfg.d:
                a = min(a, cfg.k_gap * (gap - safe) + cfg.k_speed * (ahead.v - b.v))
        accel[vid] = _clamp(a, -cfg.b_max, cfg.a_max)
    for vid in sorted(world.bodies):
        b = world.bodies[vid]
        v_new = max(0.0, b.v + accel[vid] * dt)
        b.a = (v_new - b.v) / dt
        ds = 0.5 * (b.v + v_new) * dt
        bound = b.v * dt + 0.5 * cfg.a_max * dt * dt
        world.max_step_excess = max(world.max_step_excess, ds - bound)
        b.s += ds
        b.v = v_new
    for vid in sorted(world.bodies):
        b = world.bodies[vid]
        if b.mtp is not None and b.mtp.get("lane") is not None and int(b.mtp["lane"]) != b.lane:
            lane = int(b.mtp["lane"])
            front = world.same_lane_ahead(vid, lane)
            rear = world.same_lane_behind(vid, lane)
            if (front is None or front.s - b.s >= cfg.min_gap) and (rear is None or b.s - rear.s >= cfg.min_gap):
                b.lane = lane
    by_lane: dict[int, list[Body]] = {}
    for b in world.bodies.values():
        by_lane.setdefault(b.lane, []).append(b)
    for bodies in by_lane.values():
        bodies.sort(key=lambda x: x.s)
        for back, front in zip(bodies, bodies[1:]):
            world.min_gap_seen = min(world.min_gap_seen, front.s - back.s)


def arrival_check(world: World, vid: VehicleId) -> int | None:
    """Token of the physical goal ``vid`` has just reached, at most once per goal."""
    b = world.bodies[vid]
    if b.watch is None or b.watch[1] in b.fired:
        return None
    kind, token = b.watch
    cfg = world.config
    ok = False
    if kind == "MTP" and b.mtp is not None:
        ok = b.mtp.get("lane") is None or int(b.mtp["lane"]) == b.lane
        target = world.bodies.get(b.mtp.get("target")) if b.mtp.get("target") else None
        if ok and target is not None:
            err = target.s + float(b.mtp.get("offset", 0.0)) - b.s
            ok = abs(err) <= cfg.arrival_tolerance and abs(target.v - b.v) <= cfg.speed_tolerance
    elif kind == "SH" and b.sh is not None:
        ref = _reference(world, vid)
        if ref is not None:
            err = ref.s - b.s - _desired_gap(b.sh, b.v)
            ok = abs(err) <= cfg.arrival_tolerance and abs(ref.v - b.v) <= cfg.speed_tolerance
    if ok:
        b.fired.add(token)
        return token
    return None


# ---------------------------------------------------------------- results

@dataclass
class RunResult:
    trace: Trace
    quiescent: bool
    world: World

    @property
    def non_quiescent(self) -> bool:
        return not self.quiescent

    def summary(self) -> list[dict[str, Any]]:
        return summarize(self.trace)

    def outcomes(self) -> list[tuple[str, str, Any, dict[str, str]]]:
        return observed_outcomes(self.trace, self.world)


def summarize(trace: Trace) -> list[dict[str, Any]]:
    """One row per manoeuvre instance (or unanswered request)."""
    rows: dict[str, dict[str, Any]] = {}
    corr_owner: dict[str, str] = {}
    for r in trace:
        d = r.detail
        if r.kind == "transition" and d.get("event") == "manoeuvre-start":
            rows[d["manoeuvre"]] = {"id": d["manoeuvre"], "action": d["action"], "leader": r.vehicle,
                                    "start": r.t, "end": None, "result": None, "success": False,
                                    "messages": 0, "aborts": 0}
        elif r.kind == "transition" and d.get("event") == "step":
            for c in d["correlations"]:
                corr_owner[c] = d["manoeuvre"]
        elif r.kind == "transition" and d.get("event") == "request":
            rows.setdefault(d["correlation"], {"id": d["correlation"], "action": d["manoeuvre"],
                                               "leader": d["leader"], "start": r.t, "end": None, "result": None,
                                               "success": False, "messages": 0, "aborts": 0, "request": True})
        elif r.kind == "result" and d.get("scope") == "manoeuvre":
            row = rows[d["manoeuvre"]]
            row.update(end=r.t, result=d["result"], success=d["success"], step=d["step"])
        elif r.kind == "result" and d.get("scope") == "sub" and d.get("manoeuvre"):
            if d["result"] != RS:
                rows[d["manoeuvre"]]["aborts"] += 1
        elif r.kind == "result" and d.get("scope") == "sub" and d["correlation"] in rows:
            row = rows[d["correlation"]]
            row.update(end=r.t, result=d["result"], success=False)
    for r in trace.of_kind("msg-sent"):
        corr = r.detail["message"]["correlation"]
        owner = corr_owner.get(corr, corr)
        if owner in rows:
            rows[owner]["messages"] += 1
    out = []
    for key, row in rows.items():
        if row.get("request") and key in corr_owner:
            continue  # the leader took the request up; its manoeuvre row counts
        row.pop("request", None)
        row["duration"] = None if row["end"] is None else round(row["end"] - row["start"], 9)
        out.append(row)
    return out


def observed_outcomes(trace: Trace, world: World) -> list[tuple[str, str, Any, dict[str, str]]]:
    """(action, terminal step, result, role -> final idle) for every concluded manoeuvre."""
    out = []
    taken: set[str] = set()
    for r in trace:
        d = r.detail
        if r.kind == "transition" and d.get("event") == "step":
            taken.update(d["correlations"])
        if r.kind == "result" and d.get("scope") == "manoeuvre":
            roles = {role: world.agents[v].idle.value for role, v in d["bindings"].items()}
            res = tuple(d["result"]) if isinstance(d["result"], list) else d["result"]
            out.append((d["action"], d["step"], res, roles))
    for r in trace:
        d = r.detail
        if r.kind == "transition" and d.get("event") == "request" and d["correlation"] not in taken:
            # the request never reached a leader that took it up
            man = world.behaviours.requestable[d["manoeuvre"]]
            roles = {man.leader_role: world.agents[d["leader"]].idle.value}
            roles.update({role: world.agents[v].idle.value for role, v in d["bindings"].items()})
            res = next((x.detail["result"] for x in trace if x.kind == "result"
                        and x.detail.get("correlation") == d["correlation"]), None)
            out.append((d["manoeuvre"], man.initial, res, roles))
    return out


def run(
    scenario: Mapping[str, Any] | str | Path,
    config: SimConfig | None = None,
    seed: int = 0,
    faults: Faults | None = None,
    registry: Registry | None = None,
) -> RunResult:
    data = load_scenario(scenario)
    if config is None:
        config = SimConfig.from_dict(data.get("config", {}))
        if "t_max" in data:
            config = dataclasses.replace(config, t_max=float(data["t_max"]))
    return World(data, config, seed, registry, faults).run()


def scenario_config(data: Mapping[str, Any], overrides: Mapping[str, Any] | None = None) -> SimConfig:
    """Defaults, then the scenario's own settings, then ``overrides``."""
    cfg = SimConfig.from_dict(data.get("config", {}))
    if "t_max" in data:
        cfg = dataclasses.replace(cfg, t_max=float(data["t_max"]))
    return SimConfig.from_dict(overrides or {}, cfg)


def fault_matrix(scenario: Mapping[str, Any], config: SimConfig | None = None, seed: int = 0,
                 registry: Registry | None = None) -> list[Faults]:
    """Every single-message drop and every single forced timeout of the nominal run."""
    data = load_scenario(scenario)
    config = config or scenario_config(data)
    nominal = World(data, config, seed, registry)
    nominal.run()
    return ([Faults(drop=frozenset({k})) for k in range(nominal.messages_sent)]
            + [Faults(expire=frozenset({k})) for k in range(nominal.timed_waits)])


def all_stable(world: World) -> bool:
    return all(is_stable(a.idle) for a in world.agents.values())


def _jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple, set, frozenset)):
        return [_jsonable(v) for v in value]
    if isinstance(value, float):
        return round(value, 9)
    if hasattr(value, "value") and isinstance(getattr(value, "value"), str):
        return value.value
    return value


__all__ = [
    "Faults",
    "RunResult",
    "ScenarioError",
    "SimConfig",
    "Trace",
    "TraceRecord",
    "World",
    "advance_physics",
    "all_stable",
    "arrival_check",
    "fault_matrix",
    "load_scenario",
    "observed_outcomes",
    "run",
    "scenario_config",
    "summarize",
]
