"""Environment server: one plant per process, one learner connection at a time."""

from __future__ import annotations

import logging
import socket
from typing import Callable

import numpy as np

from ..mdp import LocalEnv
from ..plant import Crashed, PlantConfig
from . import wire

log = logging.getLogger(__name__)


class _Shutdown(Exception):
    pass


class EnvSession:
    """Protocol state machine for one connection; returns replies, never raises on bad input."""

    def __init__(self, cfg: PlantConfig):
        self.env = LocalEnv(cfg)
        self.greeted = False
        self.in_episode = False

    def handle(self, msg: dict) -> tuple[dict | None, bool]:
        """Returns ``(reply, keep_open)``."""
        kind = msg["type"]
        if kind not in wire.MESSAGE_TYPES:
            return wire.error(f"unknown message type {kind!r}"), True
        if kind == wire.SHUTDOWN:
            raise _Shutdown
        if kind == wire.HELLO:
            if msg.get("version") != wire.PROTOCOL_VERSION:
                return wire.error(f"protocol version {msg.get('version')!r} unsupported, need {wire.PROTOCOL_VERSION}"), False
            self.greeted = True
            cfg = self.env.cfg
            return {
                "type": wire.HELLO,
                "version": wire.PROTOCOL_VERSION,
                "muscles": list(cfg.muscle_names),
                "dt": cfg.dt,
            }, True
        if not self.greeted:
            return wire.error("HELLO required first"), True
        if kind == wire.RESET:
            try:
                phi = float(msg["initial_phi"])
                crash_at = msg.get("crash_at")
                state, acts = self.env.reset(phi, None if crash_at is None else int(crash_at))
            except (KeyError, TypeError, ValueError) as exc:
                return wire.error(f"bad RESET: {exc}"), True
            self.in_episode = True
            return {
                "type": wire.RESET_OK,
                "seed": msg.get("seed"),
                "phi": state.phi,
                "phi_dot": state.phi_dot,
                "activations": [float(a) for a in acts],
            }, True
        if kind == wire.STEP:
            if not self.in_episode:
                return wire.error("STEP before RESET"), True
            try:
                result, acts = self.env.step(np.asarray(msg["omega"], dtype=float))
            except (KeyError, TypeError, ValueError) as exc:
                return wire.error(f"bad STEP: {exc}"), True
            if isinstance(result, Crashed):
                self.in_episode = False
                return {"type": wire.CRASHED, "reason": result.reason, "activations": [float(a) for a in acts]}, True
            return {
                "type": wire.STEP_OK,
                "phi": result.phi,
                "phi_dot": result.phi_dot,
                "activations": [float(a) for a in acts],
            }, True
        return wire.error(f"{kind} is not a request"), True


def serve_connection(conn: socket.socket, cfg: PlantConfig) -> None:
    """Run the protocol loop on one connection; raises ``_Shutdown`` on SHUTDOWN."""
    session = EnvSession(cfg)
    with conn:
        while True:
            try:
                msg = wire.read_message(conn)
            except wire.ConnectionClosed:
                return
            except wire.FrameError as exc:
                log.warning("malformed frame, closing connection: %s", exc)
                try:
                    wire.write_message(conn, wire.error(f"malformed frame: {exc}"))
                except OSError:
                    pass
                return
            try:
                reply, keep_open = session.handle(msg)
            except _Shutdown:
                try:
                    wire.write_message(conn, {"type": wire.SHUTDOWN})
                except OSError:
                    pass
                raise
            try:
                wire.write_message(conn, reply)
            except OSError:
                return
            if not keep_open:
                return


def serve_env(
    listen_addr: tuple[str, int] | str,
    cfg: PlantConfig,
    on_ready: Callable[[tuple[str, int]], None] | None = None,
) -> None:
    """Serve learner connections one after another until a SHUTDOWN arrives."""
    if isinstance(listen_addr, str):
        listen_addr = wire.parse_address(listen_addr)
    with socket.create_server(listen_addr) as srv:
        bound = srv.getsockname()[:2]
        log.info("env server listening on %s:%d", *bound)
        if on_ready is not None:
            on_ready(bound)
        while True:
            conn, peer = srv.accept()
            conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            log.info("learner connected from %s:%d", *peer[:2])
            try:
                serve_connection(conn, cfg)
            except _Shutdown:
                log.info("shutdown requested")
                return
