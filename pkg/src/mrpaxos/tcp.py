"""Real deployment over asyncio: TCP links between processes, UDP replies to clients.

Every endpoint listens on one TCP port.  A link is a one-way outbound
connection with its own writer task and FIFO queue; the first four bytes on
a connection carry the sender's node id, then length-prefixed frames follow.
Clients additionally bind a UDP socket on the same port number to receive
replies.  The same :class:`~mrpaxos.node.Process` and client classes used in
simulation run here on :class:`TcpEnv`, with wall-clock time.
"""
from __future__ import annotations

import asyncio
import logging
import random
import struct
import time
from typing import Callable, Optional

from . import wire
from .errors import BindFailure, DuplicateNode, FrameError, RegistryUnreachable
from .membership import CLIENT, Registry, TopologyView
from .node import CpuModel, NodeConfig, Process, SimClient
from .recovery import MemoryStore
from .ring import RingConfig
from .trace import Trace
from .wire import Frame

log = logging.getLogger(__name__)

REGISTRY_ID = 0
_HELLO = struct.Struct(">I")


def parse_address(addr: str) -> tuple[str, int]:
    host, _, port = addr.rpartition(":")
    if not host or not port.isdigit() or int(port) > 65535:
        raise ValueError(f"bad address {addr!r}, expected host:port")
    return host, int(port)


class _Link:
    """Outbound FIFO link to one peer; frames queued while the peer is unreachable are dropped."""

    def __init__(self, env: "TcpEnv", dst: int):
        self.env = env
        self.dst = dst
        self.queue: asyncio.Queue = asyncio.Queue()
        self.task: Optional[asyncio.Task] = None

    def send(self, data: bytes) -> None:
        self.queue.put_nowait(data)
        if self.task is None or self.task.done():
            self.task = asyncio.get_running_loop().create_task(self._run())

    async def _run(self) -> None:
        env = self.env
        while not self.queue.empty() and not env.closed:
            addr = env.address_of(self.dst)
            if not addr:
                self._drop()
                return
            writer = None
            try:
                host, port = parse_address(addr)
                _, writer = await asyncio.wait_for(asyncio.open_connection(host, port), env.connect_timeout)
                writer.write(_HELLO.pack(env.nid))
                while not env.closed:
                    data = await self.queue.get()
                    writer.write(data)
                    if self.queue.empty():
                        await writer.drain()
            except (OSError, asyncio.TimeoutError, ValueError) as exc:
                log.debug("link %s->%s down: %s", env.nid, self.dst, exc)
                self._drop()
                env.link_down(self.dst)
                return
            finally:
                if writer is not None:
                    writer.close()

    def _drop(self) -> None:
        while not self.queue.empty():
            self.queue.get_nowait()

    def close(self) -> None:
        if self.task is not None:
            self.task.cancel()


class _Replies(asyncio.DatagramProtocol):
    def __init__(self, env: "TcpEnv"):
        self.env = env

    def datagram_received(self, data, addr):
        try:
            frame = wire.decode(data)
        except FrameError:
            return
        self.env.dispatch(REGISTRY_ID, frame)


class TcpEnv:
    """Environment for one endpoint (process, client or registry) on real sockets."""

    registry_id = REGISTRY_ID

    def __init__(self, nid: int, listen: str, registry: Optional[str] = None, *, seed: Optional[int] = None,
                 store=None, connect_timeout: float = 1.0):
        self.nid = nid
        self.listen = listen
        self.registry_addr = registry
        self.rng = random.Random(nid if seed is None else seed)
        self.trace = Trace(self.now)
        self.store = store if store is not None else MemoryStore()
        self.connect_timeout = connect_timeout
        self.endpoint = None
        self.links: dict[int, _Link] = {}
        self.server = None
        self.udp = None
        self.closed = False
        # clients and the registry are not in views, so their addresses are noted here
        self.known: dict[int, str] = {}

    # -- environment interface --------------------------------------------

    def now(self) -> float:
        return time.time()

    def at(self, t: float, fn: Callable, *args) -> None:
        if self.closed:
            return
        asyncio.get_running_loop().call_later(max(0.0, t - self.now()), fn, *args)

    def transmit(self, src: int, dst: int, frame: Frame, depart: Optional[float]) -> None:
        if depart is not None and depart > self.now():
            self.at(depart, self.transmit, src, dst, frame, None)
            return
        if frame.kind == wire.CLIENT_REPLY:
            self._send_datagram(dst, frame)
            return
        link = self.links.get(dst)
        if link is None:
            link = self.links[dst] = _Link(self, dst)
        link.send(wire.encode(frame))

    def store_delay(self, nbytes: int) -> float:
        return 0.0

    # -- plumbing ---------------------------------------------------------

    def address_of(self, nid: int) -> Optional[str]:
        if nid == REGISTRY_ID and self.registry_addr:
            return self.registry_addr
        view = getattr(self.endpoint, "view", None)
        if view is not None and nid in view.addresses:
            return view.addresses[nid]
        return self.known.get(nid)

    def _send_datagram(self, dst: int, frame: Frame) -> None:
        addr = self.address_of(dst)
        if not addr or self.closed:
            return
        try:
            host, port = parse_address(addr)
        except ValueError:
            return
        data = wire.encode(frame)
        loop = asyncio.get_running_loop()
        if self.udp is None:
            # replies are best effort: an unsendable datagram is simply lost
            loop.create_task(self._open_udp_and_send(data, (host, port)))
        else:
            self.udp.sendto(data, (host, port))

    async def _open_udp_and_send(self, data: bytes, target) -> None:
        if self.udp is None:
            self.udp, _ = await asyncio.get_running_loop().create_datagram_endpoint(
                asyncio.DatagramProtocol, local_addr=("0.0.0.0", 0))
        self.udp.sendto(data, target)

    def send_once(self, addr: str, frame: Frame) -> None:
        """One frame over a fresh connection to ``addr``, outside the per-peer links."""
        asyncio.get_running_loop().create_task(self._send_once(addr, wire.encode(frame)))

    async def _send_once(self, addr: str, data: bytes) -> None:
        writer = None
        try:
            host, port = parse_address(addr)
            _, writer = await asyncio.wait_for(asyncio.open_connection(host, port), self.connect_timeout)
            writer.write(_HELLO.pack(self.nid) + data)
            await writer.drain()
        except (OSError, asyncio.TimeoutError, ValueError) as exc:
            log.debug("one-shot send to %s failed: %s", addr, exc)
        finally:
            if writer is not None:
                writer.close()

    def link_down(self, peer: int) -> None:
        handler = getattr(self.endpoint, "on_link_down", None)
        if handler is not None and getattr(self.endpoint, "alive", True):
            handler(peer)

    def dispatch(self, src: int, frame: Frame) -> None:
        ep = self.endpoint
        if ep is not None and getattr(ep, "alive", True) and not self.closed:
            ep.receive(src, frame)

    async def _serve(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            (src,) = _HELLO.unpack(await reader.readexactly(_HELLO.size))
            buf = bytearray()
            while not self.closed:
                data = await reader.read(1 << 16)
                if not data:
                    break
                buf += data
                for raw in wire.split_stream(buf):
                    self.dispatch(src, wire.decode(raw))
        except (asyncio.IncompleteReadError, ConnectionError, FrameError) as exc:
            log.debug("inbound connection closed: %s", exc)
        finally:
            writer.close()

    async def open(self, endpoint, udp: bool = False) -> str:
        """Bind the listening socket(s); returns the address peers should use."""
        self.endpoint = endpoint
        host, port = parse_address(self.listen)
        try:
            self.server = await asyncio.start_server(self._serve, host, port)
        except OSError as exc:
            raise BindFailure(f"{self.listen}: {exc}") from exc
        port = self.server.sockets[0].getsockname()[1]
        if udp:
            try:
                self.udp, _ = await asyncio.get_running_loop().create_datagram_endpoint(
                    lambda: _Replies(self), local_addr=(host, port))
            except OSError as exc:
                raise BindFailure(f"udp {host}:{port}: {exc}") from exc
        advertised = "127.0.0.1" if host in ("0.0.0.0", "") else host
        return f"{advertised}:{port}"

    async def close(self) -> None:
        self.closed = True
        for link in self.links.values():
            link.close()
        if self.server is not None:
            self.server.close()
            await self.server.wait_closed()
        if self.udp is not None:
            self.udp.close()


class TcpRegistry:
    """The membership registry as a network service."""

    def __init__(self, env: TcpEnv, groups, suspicion_timeout: float = 2.0, check_interval: float = 0.2,
                 quorum: Optional[dict] = None):
        self.env = env
        self.registry = Registry(groups, suspicion_timeout, quorum, t_ref=env.now())
        self.check_interval = check_interval
        self.view: Optional[TopologyView] = None
        self.alive = True

    async def start(self) -> str:
        addr = await self.env.open(self)
        self.env.at(self.env.now() + self.check_interval, self._check)
        log.info("registry listening on %s", addr)
        return addr

    def _check(self) -> None:
        view = self.registry.check(self.env.now())
        if view is not None:
            removed = [n for _, n in self.registry.suspected if n not in self.registry.registered]
            self.publish(view, removed)
        self.env.at(self.env.now() + self.check_interval, self._check)

    def publish(self, view: TopologyView, extra=()) -> None:
        self.view = view
        log.info("view %d: %s", view.epoch, {g: [m.node for m in ms] for g, ms in view.rings.items()})
        frame = wire.json_frame(wire.VIEW, view.to_json(), instance=view.epoch)
        for n in sorted(set(self.registry.members_to_notify()) | set(extra)):
            self.env.transmit(REGISTRY_ID, n, frame, None)

    def address_of(self, nid: int) -> Optional[str]:
        reg = self.registry.registered.get(nid)
        return reg.address if reg is not None else self.env.known.get(nid)

    def receive(self, src: int, frame: Frame) -> None:
        now = self.env.now()
        if frame.kind == wire.HEARTBEAT:
            if not self.registry.heartbeat(src, now, frame.instance) and self.view is not None:
                self.env.transmit(REGISTRY_ID, src, wire.json_frame(
                    wire.VIEW, self.view.to_json(), instance=self.view.epoch), None)
            return
        if frame.kind != wire.REGISTER:
            return
        body = wire.json_body(frame)
        node = int(body["node"])
        address = body.get("address", "")
        try:
            view = self.registry.register(node, body["roles"], body.get("rings", ()), now,
                                          address=address, incarnation=int(body.get("incarnation", 0)))
        except DuplicateNode:
            log.warning("rejecting duplicate node %s", node)
            # the id resolves to the registered holder, so answer the newcomer's own address
            if address:
                self.env.send_once(address, Frame(wire.REGISTER_REJECT, 0, instance=node))
            return
        if address:
            self.env.known[node] = address
        self.publish(view)


def _registry_env_lookup(env: TcpEnv, reg: TcpRegistry) -> None:
    base = env.address_of

    def lookup(nid: int) -> Optional[str]:
        return reg.address_of(nid) or base(nid)

    env.address_of = lookup


async def start_registry(listen: str, groups, *, suspicion_timeout: float = 2.0,
                         check_interval: float = 0.2, quorum: Optional[dict] = None) -> tuple[TcpRegistry, str]:
    env = TcpEnv(REGISTRY_ID, listen)
    reg = TcpRegistry(env, groups, suspicion_timeout, check_interval, quorum)
    _registry_env_lookup(env, reg)
    addr = await reg.start()
    return reg, addr


async def start_node(nid: int, roles, rings, *, listen: str, registry: str,
                     ring_cfg: Optional[RingConfig] = None, cfg: Optional[NodeConfig] = None,
                     app_factory=None, store=None, recover: Optional[str] = None) -> Process:
    """Start a replica process and register it; ``recover`` rejoins as a recovering learner."""
    env = TcpEnv(nid, listen, registry, store=store)
    proc = Process(env, nid, roles, rings, ring_cfg=ring_cfg, cpu=CpuModel(),
                   cfg=cfg or NodeConfig(heartbeat_interval=0.5), app_factory=app_factory)
    proc.address = await env.open(proc)
    if recover:
        proc.alive = False
        proc.restart(recover)
    else:
        proc.start()
        proc.join()
    return proc


async def start_client(cid: int, groups, *, listen: str, registry: str, payload: Callable[[], bytes],
                       threads: int = 1, duration: float = 10.0, resubmit_timeout: float = 2.0,
                       wait_view: float = 5.0) -> SimClient:
    """Register a closed-loop client, wait for a view with a coordinator, then start submitting."""
    env = TcpEnv(cid, listen, registry)
    start = env.now()
    client = SimClient(env, cid, groups, payload=payload, mode="closed", threads=threads,
                       start=start, stop=start + duration, resubmit_timeout=resubmit_timeout)
    addr = await env.open(client, udp=True)
    body = {"node": cid, "roles": [CLIENT], "rings": [], "address": addr}
    env.transmit(cid, REGISTRY_ID, wire.json_frame(wire.REGISTER, body, node=cid), None)
    deadline = env.now() + wait_view
    while True:
        view = client.view
        if view is not None and all(view.acceptors(g) for g in client.groups):
            break
        if env.now() > deadline:
            await env.close()
            raise RegistryUnreachable(f"no usable view from {registry} within {wait_view}s")
        await asyncio.sleep(0.05)
    t0 = env.now()
    client.start_at, client.stop_at = t0, t0 + duration
    client.start(client.view)
    return client


async def stop(*endpoints) -> None:
    for ep in endpoints:
        if hasattr(ep, "alive"):
            ep.alive = False
        await ep.env.close()
