"""Deterministic master/agent message simulation of the lower and upper loops.

Agents and master run the very same kernels as :mod:`biprox.lower`, but each
side only sees what crosses the wire: agents upload ``(x+, g)`` (ALADIN
family) or ``(x+, lam)`` (ADMM family) and the master broadcasts ``(y+, flag)``.
Time advances in integer ticks, so every run is reproducible.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .core import (AgentProblem, HessianMode, LowerState, Method, SolverConfig, UpperState,
                   as_vector)
from .errors import DuplicateUpload, MalformedFrame, MissingUpload
from .lower import (SweepReport, agent_local_step, build_report, carried_dual, dual_update_admm,
                    dual_update_aladin, master_consensus, refreshed_B_i)

WIRE_VERSION = 1
TAG_BROADCAST_KEEP = 0x01
TAG_BROADCAST_MOVE = 0x02
TAG_UPLOAD_G = 0x03
TAG_UPLOAD_LAMBDA = 0x04

_HEADER = struct.Struct("<BBI")
_BCAST = struct.Struct("<QI")
_UPLOAD = struct.Struct("<QII")


def _same(a: np.ndarray, b: np.ndarray) -> bool:
    return a.shape == b.shape and a.tobytes() == b.tobytes()


@dataclass(frozen=True, eq=False)
class AgentUpload:
    """One agent's contribution to a round; ``payload`` is g or lambda by ``kind``."""

    agent_id: int
    x_plus: np.ndarray
    payload: np.ndarray
    round: int
    kind: str = "g"

    def __post_init__(self):
        if self.kind not in ("g", "lambda"):
            raise ValueError("kind must be 'g' or 'lambda'")
        if self.agent_id < 0 or self.round < 0:
            raise ValueError("agent_id and round must be non-negative")

    def __eq__(self, other):
        return (isinstance(other, AgentUpload) and self.agent_id == other.agent_id
                and self.round == other.round and self.kind == other.kind
                and _same(np.asarray(self.x_plus, dtype="<f8"), np.asarray(other.x_plus, dtype="<f8"))
                and _same(np.asarray(self.payload, dtype="<f8"), np.asarray(other.payload, dtype="<f8")))


@dataclass(frozen=True, eq=False)
class MasterBroadcast:
    y_plus: np.ndarray
    z_flag: int
    round: int

    def __post_init__(self):
        if self.z_flag not in (0, 1):
            raise ValueError("z_flag must be 0 or 1")

    def __eq__(self, other):
        return (isinstance(other, MasterBroadcast) and self.z_flag == other.z_flag
                and self.round == other.round
                and _same(np.asarray(self.y_plus, dtype="<f8"), np.asarray(other.y_plus, dtype="<f8")))


def _vec_bytes(v) -> bytes:
    v = np.ascontiguousarray(v, dtype="<f8").reshape(-1)
    if not np.all(np.isfinite(v)):
        raise ValueError("cannot encode non-finite entries")
    return v.tobytes()


def encode(message) -> bytes:
    """``[version u8][tag u8][payload length u32][payload]``, all little-endian."""
    if isinstance(message, MasterBroadcast):
        y = np.asarray(message.y_plus).reshape(-1)
        tag = TAG_BROADCAST_MOVE if message.z_flag else TAG_BROADCAST_KEEP
        payload = _BCAST.pack(message.round, y.size) + _vec_bytes(y)
    elif isinstance(message, AgentUpload):
        x = np.asarray(message.x_plus).reshape(-1)
        p = np.asarray(message.payload).reshape(-1)
        if x.size != p.size:
            raise ValueError("x_plus and payload must have the same length")
        tag = TAG_UPLOAD_G if message.kind == "g" else TAG_UPLOAD_LAMBDA
        payload = _UPLOAD.pack(message.round, message.agent_id, x.size) + _vec_bytes(x) + _vec_bytes(p)
    else:
        raise TypeError(f"cannot encode {type(message).__name__}")
    return _HEADER.pack(WIRE_VERSION, tag, len(payload)) + payload


def _read_vec(buf: bytes, offset: int, n: int) -> np.ndarray:
    return np.frombuffer(buf, dtype="<f8", count=n, offset=offset).astype(np.float64)


def decode(frame: bytes):
    """Inverse of :func:`encode`; raises :class:`MalformedFrame` on any inconsistency."""
    frame = bytes(frame)
    if len(frame) < _HEADER.size:
        raise MalformedFrame(f"frame of {len(frame)} bytes is shorter than the header")
    version, tag, length = _HEADER.unpack_from(frame)
    if version != WIRE_VERSION:
        raise MalformedFrame(f"unsupported wire version {version}")
    body = frame[_HEADER.size:]
    if len(body) != length:
        raise MalformedFrame(f"payload length {len(body)} != declared {length}")
    if tag in (TAG_BROADCAST_KEEP, TAG_BROADCAST_MOVE):
        if length < _BCAST.size:
            raise MalformedFrame("truncated broadcast")
        rnd, n = _BCAST.unpack_from(body)
        if length != _BCAST.size + 8 * n:
            raise MalformedFrame("broadcast vector length mismatch")
        return MasterBroadcast(_read_vec(body, _BCAST.size, n),
                               1 if tag == TAG_BROADCAST_MOVE else 0, rnd)
    if tag in (TAG_UPLOAD_G, TAG_UPLOAD_LAMBDA):
        if length < _UPLOAD.size:
            raise MalformedFrame("truncated upload")
        rnd, aid, n = _UPLOAD.unpack_from(body)
        if length != _UPLOAD.size + 16 * n:
            raise MalformedFrame("upload vector length mismatch")
        x = _read_vec(body, _UPLOAD.size, n)
        p = _read_vec(body, _UPLOAD.size + 8 * n, n)
        return AgentUpload(aid, x, p, rnd, "g" if tag == TAG_UPLOAD_G else "lambda")
    raise MalformedFrame(f"unknown message tag 0x{tag:02x}")


# ---------------------------------------------------------------------------
# bus
# ---------------------------------------------------------------------------

@dataclass
class Bus:
    """Tick-driven delivery of encoded frames.

    Frames scheduled for the same tick are delivered in ``(round, sender)``
    order, so the outcome never depends on the order of ``send`` calls.
    """

    tick_budget: int = 16
    now: int = 0
    _pending: list = field(default_factory=list)
    sent_uploads: int = 0
    sent_broadcasts: int = 0
    log: list = field(default_factory=list)

    def send(self, frame: bytes, sender: int, round_: int, delay: int = 1) -> None:
        if delay < 0:
            raise ValueError("delay must be >= 0")
        self._pending.append((self.now + delay, round_, sender, frame))

    def deliver_due(self) -> List[bytes]:
        due = sorted((p for p in self._pending if p[0] <= self.now), key=lambda p: p[:3])
        self._pending = [p for p in self._pending if p[0] > self.now]
        return [p[3] for p in due]

    def advance(self) -> None:
        self.now += 1


# ---------------------------------------------------------------------------
# agents and master
# ---------------------------------------------------------------------------

class SimAgent:
    """Holds one agent's private state: x_i, lambda_i, g_i, B_i and its view of y, z.

    ``silent`` agents never upload, ``duplicate`` agents upload twice and
    ``delay`` sets the upload latency in ticks.
    """

    def __init__(self, agent_id: int, problem: AgentProblem, config: SolverConfig, B_i,
                 delay: int = 1, silent: bool = False, duplicate: bool = False):
        self.agent_id = agent_id
        self.problem = problem
        self.config = config
        self.B_i = np.array(B_i, dtype=np.float64)
        self.delay = delay
        self.silent = silent
        self.duplicate = duplicate
        self.x = self.y = self.z = None
        self.lam = np.zeros(problem.dim)
        self.g = np.zeros(problem.dim)
        self._lam_used = None
        self.round = 0

    def receive(self, frame: bytes) -> None:
        msg = decode(frame)
        if not isinstance(msg, MasterBroadcast):
            raise MalformedFrame("agents only accept broadcasts")
        y_plus = msg.y_plus
        if msg.round == 0:
            self.x = y_plus.copy()
            self.y = self.z = y_plus.copy()
            self.round = 0
            return
        cfg = self.config
        # reconstruct lambda+ from our own upload and the broadcast y+
        if cfg.method.is_admm:
            lam_plus = dual_update_admm(self._lam_used, cfg.rho, self.x, y_plus)
        else:
            lam_plus = dual_update_aladin(self.B_i, self.x, y_plus, self.g)
        self.lam = carried_dual(self._lam_used, lam_plus, cfg)
        self.y = y_plus
        if msg.z_flag:
            self.z = y_plus
            if (cfg.hessian_mode is HessianMode.CURVATURE_REFRESH and not cfg.method.is_admm
                    and cfg.method.is_prox):
                self.B_i = refreshed_B_i(self.problem, cfg, self.z)
        self.round = msg.round

    def step(self, bus: Bus, round_: int) -> Optional[AgentUpload]:
        x_plus, lam_used, g = agent_local_step(self.problem, self.x, self.y, self.z, self.lam,
                                               self.B_i, self.config)
        self.x, self._lam_used, self.g = x_plus, lam_used, g
        if self.config.method.is_admm:
            up = AgentUpload(self.agent_id, x_plus, lam_used, round_, "lambda")
        else:
            up = AgentUpload(self.agent_id, x_plus, g, round_, "g")
        if self.silent:
            return None
        frame = encode(up)
        bus.send(frame, self.agent_id, round_, self.delay)
        if self.duplicate:
            bus.send(frame, self.agent_id, round_, self.delay)
        return up


class SimMaster:
    """Consensus side.  Keeps a mirror of the lower state to build sweep reports.

    The master also holds the objective oracles so it can evaluate the merit
    that drives the ``z`` flag.
    """

    def __init__(self, problems: Sequence[AgentProblem], config: SolverConfig, state: LowerState,
                 upper: UpperState):
        self.problems = list(problems)
        self.config = config
        self.state = state
        self.upper = upper
        self.round = 0
        self.last_report: Optional[SweepReport] = None

    @property
    def N(self) -> int:
        return len(self.problems)

    def initial_broadcast(self) -> MasterBroadcast:
        return MasterBroadcast(self.upper.z.copy(), 1, 0)

    def consensus(self, uploads: Dict[int, AgentUpload], round_: int) -> MasterBroadcast:
        ordered = [uploads[i] for i in range(self.N)]
        x_plus = np.stack([u.x_plus for u in ordered])
        cfg = self.config
        if cfg.method.is_admm:
            lam_used = np.stack([u.payload for u in ordered])
            g = -lam_used
        else:
            g = np.stack([u.payload for u in ordered])
            # lambda never crosses the wire here: the master produced it last round
            lam_used = self.state.lam
        y_plus, lam_plus = master_consensus(x_plus, lam_used, g, self.state.B, self.state.y, cfg)
        report = build_report(self.problems, self.state, x_plus, lam_used, g, y_plus, lam_plus,
                              self.upper, cfg)
        self.last_report = report
        self.state = report.state_after
        if cfg.method.is_prox:
            flag = int(report.merit_after.total < self.upper.merit_at_z)
        else:
            flag = 1
        return MasterBroadcast(y_plus, flag, round_)


def run_round(bus: Bus, agents: Sequence[SimAgent], master: SimMaster):
    """One lower sweep as a message exchange.

    Returns the broadcast and the uploads in agent order.  Raises
    :class:`MissingUpload` when some agent stays silent past the tick budget
    and :class:`DuplicateUpload` when one uploads twice.
    """
    round_ = master.round + 1
    for a in agents:
        a.step(bus, round_)
    got: Dict[int, AgentUpload] = {}
    start = bus.now
    while True:
        for frame in bus.deliver_due():
            msg = decode(frame)
            if not isinstance(msg, AgentUpload) or msg.round != round_:
                raise MalformedFrame("unexpected frame at the master")
            if not 0 <= msg.agent_id < master.N:
                raise MalformedFrame(f"unknown agent id {msg.agent_id}")
            if msg.agent_id in got:
                raise DuplicateUpload(f"agent {msg.agent_id} uploaded twice in round {round_}")
            got[msg.agent_id] = msg
            bus.sent_uploads += 1
        if len(got) == master.N:
            break
        if bus.now - start >= bus.tick_budget:
            missing = sorted(set(range(master.N)) - set(got))
            raise MissingUpload(f"round {round_}: no upload from agent(s) {missing} "
                                f"within {bus.tick_budget} ticks")
        bus.advance()
    bcast = master.consensus(got, round_)
    master.round = round_
    frame = encode(bcast)
    bus.sent_broadcasts += 1
    bus.log.append((round_, len(got), 1))
    for a in agents:
        a.receive(frame)
    return bcast, [got[i] for i in range(master.N)]


class ProtocolSweeper:
    """Drop-in ``sweeper`` for :func:`biprox.globalize.solve` that routes every sweep through the bus.

    The solver's view of the state is checked against the master's mirror
    each round, so any drift between the two paths fails loudly.
    """

    def __init__(self, problems: Sequence[AgentProblem], config: SolverConfig, z0,
                 tick_budget: int = 16, delays=None, silent=(), duplicate=()):
        from .lower import initial_B

        self.problems = list(problems)
        N = len(self.problems)
        z0 = as_vector(z0, self.problems[0].dim)
        B = initial_B(self.problems, config, z0)
        self.bus = Bus(tick_budget=tick_budget)
        delays = list(delays) if delays is not None else [1] * N
        self.agents = [SimAgent(i, p, config, B[i], delay=delays[i], silent=i in silent,
                                duplicate=i in duplicate) for i, p in enumerate(self.problems)]
        state = LowerState.initial(z0, B)
        upper = UpperState(z=z0, sigma=np.zeros(N), outer_index=0, merit_at_z=0.0)
        self.master = SimMaster(self.problems, config, state, upper)
        frame = encode(self.master.initial_broadcast())
        self.bus.sent_broadcasts += 1
        for a in self.agents:
            a.receive(frame)
        self.broadcasts: List[MasterBroadcast] = []

    def __call__(self, state: LowerState, problems, config: SolverConfig,
                 upper: UpperState) -> SweepReport:
        m = self.master
        if not (_same(state.y, m.state.y) and _same(state.x, m.state.x)
                and _same(state.lam, m.state.lam)):
            raise RuntimeError("solver state and protocol mirror diverged")
        # pick up B refreshes and upper-level changes made by the solver
        m.state = state
        m.upper = upper
        bcast, _ = run_round(self.bus, self.agents, m)
        self.broadcasts.append(bcast)
        return m.last_report
