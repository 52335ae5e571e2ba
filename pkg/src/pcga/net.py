"""Networked manager and workers speaking the ``protocol`` wire format over TCP.

The manager owns the authoritative vector.  Each worker connection goes
HELLO -> SNAPSHOT, then DELTA -> UPDATE repeatedly; once the manager reaches
a terminal status every HELLO or DELTA is answered with TERMINATE.  Merges
and the encoding of the reply happen under one lock, never across a network
wait.

Workers piggyback their best fitness on each DELTA; this is how the manager
learns that the problem is solved.  A worker that samples the known optimum
stops at once and sends a solution notice: a DELTA carrying its evaluation
count and best fitness but no count changes, since the unfinished interval is
abandoned just as it is in the serial simulator.

Log lines are ``event=<name> key=value ...``, one per event.
"""

from __future__ import annotations

import asyncio
import enum
import logging
import math
import os
import socket
import struct
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from .benchmarks import FitnessFunction
from .cga import CgaParams, ProbabilityVector, cga_iteration, init_vector, is_converged, worker_stream
from .protocol import (
    Delta,
    DeltaReport,
    Hello,
    ProtocolError,
    Snapshot,
    Terminate,
    TerminateReason,
    Update,
    apply_delta,
    compute_delta,
    decode_counts,
    encode_counts,
    frame,
    read_message,
    recv_message,
)

log = logging.getLogger("pcga.net")

CHECKPOINT_MAGIC = b"PCGACKPT"
_CHECKPOINT_HEAD = struct.Struct(">8sBQI")


def log_event(event: str, **fields):
    log.info("event=%s%s", event, "".join(f" {k}={v}" for k, v in fields.items()))


def parse_address(text: str, default_host: str = "127.0.0.1") -> tuple[str, int]:
    host, sep, port = text.rpartition(":")
    if not sep:
        host, port = "", text
    try:
        port = int(port)
    except ValueError:
        raise ValueError(f"invalid address {text!r}; expected host:port") from None
    if not 0 <= port <= 65535:
        raise ValueError(f"port {port} out of range")
    return host.strip("[]") or default_host, port


# ---------------------------------------------------------------------------
# checkpoints (an extension: the manager is otherwise stateless across restarts)


def write_checkpoint(path, v: ProbabilityVector):
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(_CHECKPOINT_HEAD.pack(CHECKPOINT_MAGIC, 1, v.population_size, v.length) + encode_counts(v))
    os.replace(tmp, path)


def read_checkpoint(path) -> ProbabilityVector:
    data = Path(path).read_bytes()
    if len(data) < _CHECKPOINT_HEAD.size:
        raise ProtocolError(f"checkpoint {path} is truncated")
    magic, version, n, length = _CHECKPOINT_HEAD.unpack_from(data)
    if magic != CHECKPOINT_MAGIC or version != 1:
        raise ProtocolError(f"{path} is not a version-1 checkpoint")
    return decode_counts(data[_CHECKPOINT_HEAD.size :], n, length)


# ---------------------------------------------------------------------------
# manager


class Status(str, enum.Enum):
    RUNNING = "running"
    SOLVED = "solved"
    CONVERGED = "converged"
    SHUTTING_DOWN = "shutting-down"


_REASONS = {
    Status.SOLVED: TerminateReason.SOLVED,
    Status.CONVERGED: TerminateReason.CONVERGED,
    Status.SHUTTING_DOWN: TerminateReason.SHUTDOWN,
}


@dataclass
class TerminationPolicy:
    target_fitness: float | None = None
    stop_on_convergence: bool = True
    max_evaluations: int | None = None

    @classmethod
    def for_benchmark(cls, benchmark: FitnessFunction, **kw) -> "TerminationPolicy":
        return cls(target_fitness=benchmark.optimum, **kw)


@dataclass
class ManagerState:
    vector: ProbabilityVector
    merges_applied: int = 0
    clamp_events: int = 0
    evaluations_reported: int = 0
    best_fitness_reported: float = -math.inf
    status: Status = Status.RUNNING

    def finish(self, status: Status) -> bool:
        """Leave RUNNING for ``status``; later calls are ignored."""
        if self.status is not Status.RUNNING or status is Status.RUNNING:
            return False
        self.status = status
        return True


class Manager:
    def __init__(
        self,
        params: CgaParams,
        length: int,
        policy: TerminationPolicy | None = None,
        *,
        checkpoint=None,
        checkpoint_every: float = 60.0,
        linger: float = 2.0,
        on_transaction=None,
    ):
        self.params = params
        self.policy = policy or TerminationPolicy()
        self.checkpoint = Path(checkpoint) if checkpoint else None
        self.checkpoint_every = checkpoint_every
        self.linger = linger
        self.on_transaction = on_transaction
        vector = init_vector(params, length)
        if self.checkpoint and self.checkpoint.exists():
            saved = read_checkpoint(self.checkpoint)
            if saved.length != length or saved.population_size != params.population_size:
                raise ValueError(f"checkpoint {self.checkpoint} does not match N={params.population_size}, length={length}")
            vector = saved
            log_event("resume", path=self.checkpoint)
        self.state = ManagerState(vector)
        self.address: tuple[str, int] | None = None
        self.started = threading.Event()
        self._loop: asyncio.AbstractEventLoop | None = None
        self._lock: asyncio.Lock | None = None
        self._terminal: asyncio.Event | None = None
        self._writers: set = set()

    # -- status -----------------------------------------------------------

    def _finish(self, status: Status, **fields):
        if self.state.finish(status):
            log_event("terminate", status=status.value, merges=self.state.merges_applied, **fields)
            self._terminal.set()

    def request_shutdown(self):
        """Thread-safe request to stop; workers are told TERMINATE(shutdown)."""
        if self._loop is not None:
            self._loop.call_soon_threadsafe(self._finish, Status.SHUTTING_DOWN)

    def _check_termination(self):
        st, pol = self.state, self.policy
        if pol.target_fitness is not None and st.best_fitness_reported >= pol.target_fitness:
            self._finish(Status.SOLVED, best=st.best_fitness_reported)
        elif pol.stop_on_convergence and is_converged(st.vector):
            self._finish(Status.CONVERGED)
        elif pol.max_evaluations is not None and st.evaluations_reported >= pol.max_evaluations:
            self._finish(Status.SHUTTING_DOWN, evaluations=st.evaluations_reported)

    def _terminate_frame(self) -> bytes:
        return frame(Terminate(_REASONS[self.state.status]))

    # -- transactions -----------------------------------------------------

    async def _snapshot(self) -> bytes:
        async with self._lock:
            if self.state.status is not Status.RUNNING:
                return self._terminate_frame()
            return frame(Snapshot(self.state.vector))

    async def _merge(self, msg: Delta, peer) -> bytes:
        async with self._lock:
            st = self.state
            if st.status is not Status.RUNNING:
                return self._terminate_frame()
            vector, clamps = apply_delta(st.vector, msg.report)
            st.vector = vector
            st.merges_applied += 1
            st.clamp_events += clamps
            st.evaluations_reported += msg.report.evaluations
            st.best_fitness_reported = max(st.best_fitness_reported, msg.best_fitness)
            log_event(
                "merge", peer=peer, entries=len(msg.report), evaluations=msg.report.evaluations,
                best=msg.best_fitness, merges=st.merges_applied,
            )
            if clamps:
                log_event("clamp", peer=peer, count=clamps, total=st.clamp_events)
            self._check_termination()
            if st.status is not Status.RUNNING:
                return self._terminate_frame()
            payload = Update.of(vector)
            if self.on_transaction is not None:
                self.on_transaction(vector, payload.packed)
            return frame(payload)

    async def _handle(self, reader, writer):
        peer = "%s:%s" % writer.get_extra_info("peername")[:2]
        self._writers.add(writer)
        log_event("connect", peer=peer)
        greeted = False
        try:
            while True:
                msg = await read_message(reader)
                if isinstance(msg, Hello):
                    reply = await self._snapshot()
                    greeted = True
                elif isinstance(msg, Delta) and greeted:
                    reply = await self._merge(msg, peer)
                else:
                    raise ProtocolError(f"unexpected {type(msg).__name__} from worker")
                writer.write(reply)
                await writer.drain()
                if reply[5] == Terminate.kind:
                    log_event("terminate_sent", peer=peer, status=self.state.status.value)
                    break
        except (asyncio.IncompleteReadError, ConnectionError):
            log_event("disconnect", peer=peer)
        except (ProtocolError, IndexError) as exc:
            log_event("protocol_error", peer=peer, error=type(exc).__name__, detail=repr(str(exc)))
        finally:
            self._writers.discard(writer)
            writer.close()

    # -- service ----------------------------------------------------------

    async def _checkpoint_loop(self):
        while True:
            await asyncio.sleep(self.checkpoint_every)
            async with self._lock:
                write_checkpoint(self.checkpoint, self.state.vector)
            log_event("checkpoint", path=self.checkpoint)

    async def serve(self, host: str = "127.0.0.1", port: int = 0) -> ManagerState:
        """Serve until a terminal status, then linger briefly to notify workers."""
        self._loop = asyncio.get_running_loop()
        self._lock = asyncio.Lock()
        self._terminal = asyncio.Event()
        server = await asyncio.start_server(self._handle, host, port)
        self.address = server.sockets[0].getsockname()[:2]
        log_event("listen", address="%s:%s" % self.address, length=self.state.vector.length,
                  N=self.params.population_size)
        self.started.set()
        ckpt = asyncio.create_task(self._checkpoint_loop()) if self.checkpoint else None
        try:
            await self._terminal.wait()
            deadline = self._loop.time() + self.linger
            while self._writers and self._loop.time() < deadline:
                await asyncio.sleep(0.01)
        finally:
            if ckpt is not None:
                ckpt.cancel()
            server.close()
            for w in list(self._writers):
                w.close()
            await server.wait_closed()
            if self.checkpoint:
                write_checkpoint(self.checkpoint, self.state.vector)
        return self.state

    def run(self, host: str = "127.0.0.1", port: int = 0) -> ManagerState:
        return asyncio.run(self.serve(host, port))

    def start_background(self, host: str = "127.0.0.1", port: int = 0, timeout: float = 10.0) -> threading.Thread:
        """Serve from a daemon thread; returns once the socket is bound."""
        t = threading.Thread(target=self.run, args=(host, port), daemon=True, name="pcga-manager")
        t.start()
        if not self.started.wait(timeout):
            raise TimeoutError("manager did not start listening")
        return t


def manager_serve(bind: str, params: CgaParams, length: int, policy: TerminationPolicy, **kw) -> ManagerState:
    host, port = parse_address(bind, default_host="0.0.0.0")
    return Manager(params, length, policy, **kw).run(host, port)


# ---------------------------------------------------------------------------
# worker


@dataclass
class WorkerReport:
    evaluations: int = 0
    transactions: int = 0
    reconnects: int = 0
    best_fitness: float = -math.inf
    reason: TerminateReason | None = None
    stopped: bool = False


class Worker:
    def __init__(
        self,
        address: tuple[str, int],
        sync_interval: int,
        benchmark: FitnessFunction,
        seed: int,
        *,
        selection_rate: int = 8,
        stream: int = 0,
        retries: int = 10,
        backoff: float = 0.05,
        max_backoff: float = 2.0,
        timeout: float = 60.0,
    ):
        if sync_interval < 1:
            raise ValueError(f"sync_interval must be >= 1, got {sync_interval}")
        self.address = address
        self.m = sync_interval
        self.benchmark = benchmark
        self.seed = seed
        self.s = selection_rate
        self.rng = worker_stream(seed, stream)
        self.retries = retries
        self.backoff = backoff
        self.max_backoff = max_backoff
        self.timeout = timeout
        self.report = WorkerReport()
        self.local: ProbabilityVector | None = None
        self._stop = threading.Event()

    def stop(self):
        """Abandon work at the next iteration boundary, as if the host went down."""
        self._stop.set()

    def _connect(self) -> socket.socket:
        failures = 0
        while True:
            try:
                return socket.create_connection(self.address, timeout=self.timeout)
            except OSError as exc:
                failures += 1
                if failures > self.retries or self._stop.is_set():
                    raise ConnectionError(f"manager {self.address} unreachable: {exc}") from exc
                delay = min(self.max_backoff, self.backoff * 2 ** (failures - 1))
                log_event("retry", attempt=failures, delay=f"{delay:.3f}")
                time.sleep(delay)

    def run(self) -> WorkerReport:
        rep = self.report
        while True:
            try:
                sock = self._connect()
            except ConnectionError:
                return rep
            try:
                with sock:
                    if self._session(sock):
                        return rep
            except (OSError, ProtocolError) as exc:
                # unsent progress since the last UPDATE is lost; rejoin from a fresh snapshot
                rep.reconnects += 1
                log_event("connection_lost", error=type(exc).__name__)

    def _exchange(self, sock, msg):
        sock.sendall(frame(msg))
        return recv_message(sock)

    def _session(self, sock) -> bool:
        """One connection's life; True when the worker is finished."""
        rep = self.report
        reply = self._exchange(sock, Hello())
        if isinstance(reply, Terminate):
            rep.reason = reply.reason
            return True
        if not isinstance(reply, Snapshot):
            raise ProtocolError(f"expected SNAPSHOT, got {type(reply).__name__}")
        snapshot = reply.vector
        if snapshot.length != self.benchmark.length:
            raise ValueError(f"manager vector length {snapshot.length} != benchmark length {self.benchmark.length}")
        params = CgaParams(snapshot.population_size, self.s, self.seed)
        n, length = snapshot.population_size, snapshot.length
        optimum = self.benchmark.optimum
        local, since = snapshot, 0
        self.local = local
        while True:
            if self._stop.is_set():
                rep.stopped = True
                return True
            res = cga_iteration(local, params, self.benchmark, self.rng)
            if optimum is not None and res.best.fitness >= optimum:
                used = res.best_index + 1
                since += used
                rep.evaluations += used
                rep.best_fitness = max(rep.best_fitness, res.best.fitness)
                notice = Delta(DeltaReport((), since), rep.best_fitness)
                reply = self._exchange(sock, notice)
            else:
                local = res.vector
                since += self.s
                rep.evaluations += self.s
                rep.best_fitness = max(rep.best_fitness, res.best.fitness)
                self.local = local
                if since < self.m:
                    continue
                reply = self._exchange(sock, Delta(compute_delta(snapshot, local, since), rep.best_fitness))
            if isinstance(reply, Terminate):
                rep.reason = reply.reason
                return True
            if not isinstance(reply, Update):
                raise ProtocolError(f"expected UPDATE, got {type(reply).__name__}")
            snapshot = local = reply.vector(n, length)
            self.local = local
            since = 0
            rep.transactions += 1


def worker_run(manager: str, sync_interval: int, benchmark: FitnessFunction, seed: int, **kw) -> WorkerReport:
    return Worker(parse_address(manager), sync_interval, benchmark, seed, **kw).run()
