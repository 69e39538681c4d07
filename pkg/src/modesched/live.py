"""Interactive closed-loop simulation service.

Runs the receding-horizon controller against the simulated plant and streams
state frames at the simulated sensor rate (30 Hz) over WebSockets, while
accepting human-injected disturbance impulses and pause/resume/stop commands
mid-run. One asyncio task owns each session's control loop; subscribers get
broadcast frames through bounded queues and are dropped if they cannot keep
up.

Frame schema (versioned, one JSON text message per frame):
  out: {"type":"state","v":1,"t":..,"x":[..],"mode":m,"u":[..]}
       {"type":"hello","v":1,"session":..,"scenario":..,"n":..,"N":..,
        "delta":..,"ratio":..,"status":..}
       {"type":"heartbeat","v":1,"t":..}
       {"type":"ack","v":1,"cmd":..,"seq":..,"applied_t":..,"status":..}
       {"type":"error","v":1,"code":..,"message":..,"seq":..}
       {"type":"event","v":1,"kind":"settle","impulse_seq":..,
        "settled_in":..,"t":..}
       {"type":"summary","v":1,...}
  in:  {"type":"impulse","index":i,"magnitude":g,"seq":s}
       {"type":"pause"} {"type":"resume"} {"type":"stop"}
"""

from __future__ import annotations

import asyncio
import itertools
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .plant import PlantConfig, propagate
from .receding import RecedingController, RhConfig
from .optimizer import SiomsParams
from .scenarios import Scenario

FRAME_VERSION = 1
SENSOR_HZ = 30.0
HEARTBEAT_S = 2.0
SETTLE_BAND_RAD = 0.025
SETTLE_HOLD_S = 1.5
ANGLE_STATE_INDEX = 3  # 1-based index of the string angle in the cart model


@dataclass
class _Impulse:
    seq: int
    index: int
    magnitude: float
    applied_t: float | None = None


class LiveSession:
    """One running closed-loop simulation with subscribers and a command
    queue. Commands take effect at plant substep boundaries; the control
    slice updates every delta seconds."""

    _ids = itertools.count(1)

    def __init__(self, scenario: Scenario, ratio: float = 1.0,
                 duration: float | None = None, plant_fine_step: float = 1e-3):
        if scenario.rh is None:
            raise ConfigError(f"scenario {scenario.name!r} has no rh section")
        if abs(scenario.rh.delta * SENSOR_HZ - round(scenario.rh.delta * SENSOR_HZ)) > 1e-9:
            raise ConfigError("delta must be a whole number of sensor frames")
        self.id = next(self._ids)
        self.scenario = scenario
        self.ratio = float(ratio)
        rh = scenario.rh
        self.cfg = RhConfig(
            T=rh.T, delta=rh.delta,
            total_duration=duration if duration is not None else rh.duration,
            inner=SiomsParams(max_iter=rh.inner_iters),
            control_spacing=scenario.control_spacing,
            table_spacing=rh.table_spacing, fine_step=rh.fine_step,
            u0_mode=scenario.u0_mode,
        )
        self.system = scenario.system
        self.cost = scenario.cost
        self.plant = PlantConfig(system=self.system, fine_step=plant_fine_step)
        self.status = "created"
        self.sim_t = float(scenario.t0)
        self.x = np.asarray(scenario.x0, dtype=float).copy()
        self.subscribers: set[asyncio.Queue] = set()
        self.commands: asyncio.Queue = asyncio.Queue()
        self.events: list[dict] = []
        self.impulse_log: list[_Impulse] = []
        self.optimize_seconds: list[float] = []
        self._task: asyncio.Task | None = None
        self._settle_watch: list[dict] = []
        self._controller: RecedingController | None = None
        self._slice = None

    # -- pub/sub ---------------------------------------------------------
    def subscribe(self) -> asyncio.Queue:
        q: asyncio.Queue = asyncio.Queue(maxsize=512)
        self.subscribers.add(q)
        return q

    def unsubscribe(self, q: asyncio.Queue) -> None:
        self.subscribers.discard(q)

    def _broadcast(self, frame: dict) -> None:
        dead = []
        for q in self.subscribers:
            try:
                q.put_nowait(frame)
            except asyncio.QueueFull:
                dead.append(q)
        for q in dead:
            self.subscribers.discard(q)

    def hello_frame(self) -> dict:
        return {
            "type": "hello", "v": FRAME_VERSION, "session": self.id,
            "scenario": self.scenario.name, "n": self.system.n,
            "N": self.system.N, "delta": self.cfg.delta,
            "sensor_hz": SENSOR_HZ, "ratio": self.ratio, "status": self.status,
        }

    # -- commands --------------------------------------------------------
    async def send_command(self, cmd: dict) -> None:
        await self.commands.put(cmd)

    def _ack(self, cmd: str, seq, **extra) -> None:
        self._broadcast({"type": "ack", "v": FRAME_VERSION, "cmd": cmd,
                         "seq": seq, "status": self.status, **extra})

    def _error(self, code: str, message: str, seq=None) -> None:
        self._broadcast({"type": "error", "v": FRAME_VERSION, "code": code,
                         "message": message, "seq": seq})

    def _handle_command(self, cmd: dict, pending: list[_Impulse]) -> None:
        kind = cmd.get("type")
        seq = cmd.get("seq")
        if kind == "impulse":
            if self.status != "running":
                self._error("invalid_state", f"impulse while {self.status}", seq)
                return
            index = cmd.get("index")
            if not isinstance(index, int) or not 1 <= index <= self.system.n:
                self._error("bad_index", f"state index must lie in 1..{self.system.n}", seq)
                return
            pending.append(_Impulse(seq=seq if seq is not None else -1,
                                    index=index,
                                    magnitude=float(cmd.get("magnitude", 0.0))))
        elif kind == "pause":
            if self.status != "running":
                self._error("invalid_state", f"pause while {self.status}", seq)
                return
            self.status = "paused"
            self._ack("pause", seq)
        elif kind == "resume":
            if self.status != "paused":
                self._error("invalid_state", f"resume while {self.status}", seq)
                return
            self.status = "running"
            self._ack("resume", seq)
        elif kind == "stop":
            self.status = "stopped"
            self._ack("stop", seq)
        else:
            self._error("unknown_command", f"unknown command type {kind!r}", seq)

    # -- control loop ------------------------------------------------------
    def start(self) -> asyncio.Task:
        if self._task is not None:
            raise ConfigError("session already started")
        self.status = "running"
        self._task = asyncio.get_event_loop().create_task(self._run())
        return self._task

    async def _run(self) -> None:
        dt_sensor = 1.0 / SENSOR_HZ
        sub_per_delta = int(round(self.cfg.delta / dt_sensor))
        t_end = self.sim_t + self.cfg.total_duration
        wall_start = time.perf_counter()
        sim_start = self.sim_t
        last_heartbeat = wall_start
        self._controller = RecedingController(self.system, self.cost, self.cfg,
                                              t_start=self.sim_t)
        self._emit_state()
        pending: list[_Impulse] = []
        substep = 0
        try:
            while self.status != "stopped" and self.sim_t < t_end - 1e-9:
                while not self.commands.empty():
                    self._handle_command(self.commands.get_nowait(), pending)
                if self.status == "paused":
                    await asyncio.sleep(0.02)
                    wall_start = time.perf_counter() - (self.sim_t - sim_start) / max(self.ratio, 1e-9)
                    continue

                if substep % sub_per_delta == 0:
                    self._slice, record = self._controller.step(self.x)
                    self.optimize_seconds.append(record.optimize_seconds)

                for imp in pending:
                    imp.applied_t = self.sim_t
                    self.x[imp.index - 1] += imp.magnitude
                    self.impulse_log.append(imp)
                    self._ack("impulse", imp.seq, applied_t=self.sim_t)
                    self._settle_watch.append({
                        "seq": imp.seq, "t0": self.sim_t, "inside_since": None})
                    self.events.append({"kind": "impulse", "t": self.sim_t,
                                        "seq": imp.seq, "index": imp.index,
                                        "magnitude": imp.magnitude})
                pending.clear()

                t_next = min(self.sim_t + dt_sensor, t_end)
                if t_next > self.sim_t + 1e-12:
                    _, xs = propagate(self.plant, self.x, self._slice,
                                      self.sim_t, t_next)
                    self.x = xs[-1].copy()
                self.sim_t = t_next
                substep += 1
                self._check_settle()
                self._emit_state()

                now = time.perf_counter()
                if now - last_heartbeat >= HEARTBEAT_S:
                    self._broadcast({"type": "heartbeat", "v": FRAME_VERSION,
                                     "t": self.sim_t})
                    last_heartbeat = now
                if self.ratio > 0:
                    target = wall_start + (self.sim_t - sim_start) / self.ratio
                    delay = target - time.perf_counter()
                    if delay > 0:
                        await asyncio.sleep(delay)
                    else:
                        await asyncio.sleep(0)
                else:
                    await asyncio.sleep(0)
        finally:
            if self.status != "stopped":
                self.status = "stopped"
            self._broadcast(self._summary_frame())

    def _check_settle(self) -> None:
        if self.system.n < ANGLE_STATE_INDEX:
            return
        angle = abs(self.x[ANGLE_STATE_INDEX - 1])
        done = []
        for watch in self._settle_watch:
            if angle <= SETTLE_BAND_RAD:
                if watch["inside_since"] is None:
                    watch["inside_since"] = self.sim_t
                elif self.sim_t - watch["inside_since"] >= SETTLE_HOLD_S:
                    settled_in = watch["inside_since"] - watch["t0"]
                    event = {"kind": "settle", "t": self.sim_t,
                             "impulse_seq": watch["seq"],
                             "settled_in": settled_in}
                    self.events.append(event)
                    self._broadcast({"type": "event", "v": FRAME_VERSION, **event})
                    done.append(watch)
            else:
                watch["inside_since"] = None
        for watch in done:
            self._settle_watch.remove(watch)

    def _emit_state(self) -> None:
        mode = 1
        u = [0] * self.system.N
        if self._slice is not None:
            mode = int(self._slice.mode_at(min(self.sim_t, self._slice.tM)))
        u[mode - 1] = 1
        self._broadcast({
            "type": "state", "v": FRAME_VERSION, "t": round(self.sim_t, 9),
            "x": [float(v) for v in self.x], "mode": mode, "u": u,
        })

    def _summary_frame(self) -> dict:
        opt = self.optimize_seconds
        return {
            "type": "summary", "v": FRAME_VERSION, "session": self.id,
            "t": self.sim_t, "status": self.status,
            "impulses": len(self.impulse_log),
            "events": self.events,
            "optimize_seconds_max": max(opt) if opt else 0.0,
            "optimize_seconds_mean": float(np.mean(opt)) if opt else 0.0,
        }


def session_start(scenario: Scenario, ratio: float = 1.0,
                  duration: float | None = None) -> LiveSession:
    """Create a session and start its control loop on the running event
    loop; returns the session (its ``id`` identifies the stream)."""
    session = LiveSession(scenario, ratio=ratio, duration=duration)
    session.start()
    return session


def inject_impulse(session: LiveSession, index: int, magnitude: float,
                   seq: int | None = None) -> None:
    """Queue a state-jump command; it is applied at the next plant substep
    and acknowledged with the exact simulated application time."""
    if session.status == "stopped":
        raise ConfigError("session has ended")
    session.commands.put_nowait({"type": "impulse", "index": index,
                                 "magnitude": magnitude, "seq": seq})


async def serve(scenario: Scenario, host: str = "127.0.0.1", port: int = 8765,
                ratio: float = 1.0, duration: float | None = None,
                ready: asyncio.Event | None = None) -> None:
    """Host one session over WebSockets until it finishes.

    Clients connect to ws://host:port/ and immediately receive a hello frame
    followed by the state stream; inbound frames are commands. The session
    keeps running while subscribers come and go, so a dropped client can
    reconnect and resume streaming.
    """
    import websockets

    session = session_start(scenario, ratio=ratio, duration=duration)

    async def handler(ws):
        q = session.subscribe()
        await ws.send(json.dumps(session.hello_frame()))

        async def pump_out():
            try:
                while True:
                    frame = await q.get()
                    await ws.send(json.dumps(frame))
            except websockets.exceptions.ConnectionClosed:
                pass

        async def pump_in():
            try:
                async for raw in ws:
                    try:
                        cmd = json.loads(raw)
                    except json.JSONDecodeError:
                        await ws.send(json.dumps({
                            "type": "error", "v": FRAME_VERSION,
                            "code": "bad_frame", "message": "not valid JSON",
                            "seq": None}))
                        continue
                    await session.send_command(cmd)
            except websockets.exceptions.ConnectionClosed:
                pass

        try:
            done, pending_tasks = await asyncio.wait(
                [asyncio.create_task(pump_out()), asyncio.create_task(pump_in())],
                return_when=asyncio.FIRST_COMPLETED)
            for task in pending_tasks:
                task.cancel()
        finally:
            session.unsubscribe(q)

    async with websockets.serve(handler, host, port):
        if ready is not None:
            ready.set()
        while session.status != "stopped":
            await asyncio.sleep(0.05)
        # give subscribers a moment to drain the summary frame
        await asyncio.sleep(0.2)
