"""
Transports
----------
Message channels between the driver and the workers. A message is a kind
tag, a small JSON header and an opaque binary payload (a population
envelope, or nothing). Both transports deliver messages between a given
pair of endpoints in order.
"""

import json
import queue
import threading
from dataclasses import dataclass, field

import zmq

from config.settings import DRIVER_BIND, WORKER_TIMEOUT_MS
from services.errors import WorkerUnreachable
from utils.logger import dcsmc_logger


@dataclass
class Message:
    kind: bytes
    meta: dict = field(default_factory=dict)
    payload: bytes = b""


class Transport:
    """One endpoint: an inbox at `address` plus the ability to send anywhere."""

    address = None

    def send(self, address, message):
        raise NotImplementedError

    def receive(self, timeout_ms=WORKER_TIMEOUT_MS):
        """
        Next message in the inbox.

        Raises:
            WorkerUnreachable: nothing arrived within timeout_ms
        """
        raise NotImplementedError

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class InProcessHub:
    """Shared mailbox registry for endpoints living in one process."""

    def __init__(self):
        self._inboxes = {}
        self._lock = threading.Lock()

    def endpoint(self, address):
        with self._lock:
            self._inboxes.setdefault(address, queue.Queue())
        return InProcessTransport(self, address)

    def deliver(self, address, message):
        with self._lock:
            inbox = self._inboxes.get(address)
        if inbox is None:
            raise WorkerUnreachable(address, "no such in-process endpoint")
        inbox.put(message)

    def inbox(self, address):
        with self._lock:
            return self._inboxes[address]


class InProcessTransport(Transport):
    def __init__(self, hub, address):
        self.hub = hub
        self.address = address

    def send(self, address, message):
        # Payloads are bytes already; the header is copied so senders may reuse it
        self.hub.deliver(address, Message(message.kind, json.loads(json.dumps(message.meta)), message.payload))

    def receive(self, timeout_ms=WORKER_TIMEOUT_MS):
        try:
            return self.hub.inbox(self.address).get(timeout=None if timeout_ms is None else timeout_ms / 1000)
        except queue.Empty:
            raise WorkerUnreachable(self.address, f"no message within {timeout_ms} ms") from None


class SocketTransport(Transport):
    """
    zmq endpoint: a PULL inbox bound at `bind`, PUSH sockets connected on demand.

    Binding to port '*' picks a free port; the resolved address is exposed
    as `address` so it can be handed to peers.
    """

    def __init__(self, bind=DRIVER_BIND, context=None, send_timeout_ms=WORKER_TIMEOUT_MS):
        self.send_timeout_ms = send_timeout_ms
        self.context = context or zmq.Context.instance()
        self.inbox = self.context.socket(zmq.PULL)
        self.inbox.setsockopt(zmq.LINGER, 0)
        self.inbox.bind(bind)
        self.address = self.inbox.getsockopt_string(zmq.LAST_ENDPOINT)
        self._outboxes = {}
        dcsmc_logger.debug(f"Socket transport bound at {self.address}")

    def _outbox(self, address):
        if address not in self._outboxes:
            sock = self.context.socket(zmq.PUSH)
            sock.setsockopt(zmq.LINGER, 5000)
            sock.setsockopt(zmq.SNDTIMEO, self.send_timeout_ms)
            sock.connect(address)
            self._outboxes[address] = sock
        return self._outboxes[address]

    def send(self, address, message):
        frames = [message.kind, json.dumps(message.meta).encode("utf-8"), message.payload]
        try:
            self._outbox(address).send_multipart(frames)
        except zmq.error.Again:
            raise WorkerUnreachable(address, "send timed out") from None

    def receive(self, timeout_ms=WORKER_TIMEOUT_MS):
        if timeout_ms is not None and not self.inbox.poll(timeout_ms):
            raise WorkerUnreachable(self.address, f"no message within {timeout_ms} ms")
        kind, meta, payload = self.inbox.recv_multipart()
        return Message(kind, json.loads(meta.decode("utf-8")), payload)

    def close(self):
        for sock in self._outboxes.values():
            sock.close()
        self._outboxes.clear()
        self.inbox.close()


def parse_roster(text):
    """
    Worker addresses from 'host:port,host:port'.

    Bare host:port entries become tcp endpoints; full zmq endpoints pass through.
    """
    roster = []
    for item in (text or "").split(","):
        item = item.strip()
        if not item:
            continue
        roster.append(item if "://" in item else f"tcp://{item}")
    return roster
