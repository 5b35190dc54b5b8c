"""Simulated device group with deterministic collectives.

Each device is a worker thread owning one FIFO mailbox per scope; devices
share no mutable state and talk only by message passing. Collectives use a
star topology: contributions are gathered at the lowest rank of the scope,
combined strictly in ascending-rank order, and the result is sent back to
every participant. That trades bandwidth for bit-determinism: the result
is independent of scheduling and message arrival order.

Every message carries a per-scope sequence number so a mismatched call
pattern (one rank doing a different collective, or running ahead) is
diagnosed with rank IDs instead of deadlocking.
"""

from __future__ import annotations

import queue
import threading
from dataclasses import dataclass, field
from typing import Any, Callable

import numpy as np

DEFAULT_TIMEOUT_S = 30.0

SCOPE_WORLD = "world"
SCOPE_BN_GROUP = "bn_group"
_SCOPE_NAMES = (SCOPE_WORLD, SCOPE_BN_GROUP)


class CollectiveError(RuntimeError):
    """Base class for collective failures."""


class CollectiveProtocolError(CollectiveError):
    """Mismatched collective calls, payload disagreement, or invalid scope."""

    def __init__(self, msg, from_abort=False):
        super().__init__(msg)
        self.from_abort = from_abort


class CollectiveTimeoutError(CollectiveError):
    """A rank waited longer than the configured timeout for its peers."""


@dataclass
class _Message:
    src: int
    kind: str  # "allreduce" | "broadcast" | "barrier" | "result" | "release" | "abort"
    scope_key: str
    seq: int
    payload: Any = None


class DeviceHandle:
    """A single simulated device: rank, mailbox, and a seeded local RNG.

    A handle belongs to exactly one group and must only be used from its
    own worker thread. Collective calls block until the whole scope has
    participated.
    """

    def __init__(self, group: "DeviceGroup", rank: int):
        self.group = group
        self.rank = rank
        self.rng = np.random.default_rng((group.seed, rank))
        self._seq: dict[str, int] = {}

    def __repr__(self):
        return f"DeviceHandle(rank={self.rank}, world={self.group.world_size})"

    @property
    def bn_group_index(self) -> int:
        return self.rank // self.group.bn_group_size

    @property
    def bn_group_ranks(self) -> list[int]:
        g = self.group.bn_group_size
        start = self.bn_group_index * g
        return list(range(start, start + g))

    def _scope_info(self, scope: str) -> tuple[str, list[int]]:
        if scope == SCOPE_WORLD:
            return "world", list(range(self.group.world_size))
        if scope == SCOPE_BN_GROUP:
            return f"bn{self.bn_group_index}", self.bn_group_ranks
        raise CollectiveProtocolError(
            f"rank {self.rank}: unknown scope {scope!r}; expected one of {_SCOPE_NAMES}"
        )

    def _next_seq(self, scope_key: str) -> int:
        seq = self._seq.get(scope_key, 0)
        self._seq[scope_key] = seq + 1
        return seq


class DeviceGroup:
    """A fixed set of simulated devices with ranks 0..n-1.

    Ranks are partitioned into contiguous normalization sub-groups of size
    `bn_group_size` ([0..g), [g..2g), ...); `bn_group_size` must divide
    `world_size`. Collectives on disjoint sub-groups never exchange data.
    """

    def __init__(self, world_size: int, bn_group_size: int | None = None,
                 seed: int = 0, timeout_s: float = DEFAULT_TIMEOUT_S):
        if world_size < 1:
            raise ValueError(f"world_size must be >= 1, got {world_size}")
        bn_group_size = world_size if bn_group_size is None else bn_group_size
        if bn_group_size < 1 or world_size % bn_group_size != 0:
            raise ValueError(
                f"bn_group_size {bn_group_size} must divide world_size {world_size}"
            )
        self.world_size = world_size
        self.bn_group_size = bn_group_size
        self.seed = seed
        self.timeout_s = timeout_s
        # One queue per (rank, scope): traffic for disjoint scopes must not
        # interleave, or a broadcast root racing into the next round could
        # land its message in the middle of another scope's gather.
        scope_keys = ["world"] + [f"bn{i}"
                                  for i in range(world_size // bn_group_size)]
        self._mailboxes = [{key: queue.Queue() for key in scope_keys}
                          for _ in range(world_size)]
        self.handles = [DeviceHandle(self, r) for r in range(world_size)]

    # -- transport ---------------------------------------------------------

    def _send(self, dst: int, msg: _Message):
        if msg.kind == "abort":
            # must wake the destination wherever it is blocked
            for box in self._mailboxes[dst].values():
                box.put(msg)
            return
        self._mailboxes[dst][msg.scope_key].put(msg)

    def _recv(self, rank: int, scope_key: str) -> _Message:
        try:
            return self._mailboxes[rank][scope_key].get(timeout=self.timeout_s)
        except queue.Empty:
            raise CollectiveTimeoutError(
                f"rank {rank}: no message within {self.timeout_s}s"
            )

    def run(self, fn: Callable[[DeviceHandle], Any], timeout_s: float | None = None,
            return_exceptions: bool = False) -> list:
        """Run `fn(handle)` concurrently on every device; return per-rank results.

        Exceptions from any rank are re-raised on the caller, preferring the
        rank whose error carries the original diagnostic over ranks that were
        merely aborted by it. With `return_exceptions` the per-rank list is
        returned instead, holding either a result or the exception object, so
        callers can salvage partial output.
        """
        results: list[Any] = [None] * self.world_size
        errors: list[BaseException | None] = [None] * self.world_size

        def runner(handle: DeviceHandle):
            try:
                results[handle.rank] = fn(handle)
            except BaseException as exc:  # noqa: BLE001 - reported to caller
                errors[handle.rank] = exc
                # A rank dying outside the collective layer (diverged loss,
                # plain bug) would leave its peers blocked until the timeout;
                # wake them now. Collective failures are excluded: the root
                # already aborts its scope with a better diagnosis, and a
                # timed-out follower must not preempt it.
                if not isinstance(exc, CollectiveError):
                    note = (f"aborted: rank {handle.rank} failed with "
                            f"{type(exc).__name__}: {exc}")
                    for r in range(self.world_size):
                        if r != handle.rank:
                            self._send(r, _Message(handle.rank, "abort", "", -1, note))

        threads = [
            threading.Thread(target=runner, args=(h,), daemon=True, name=f"device-{h.rank}")
            for h in self.handles
        ]
        for t in threads:
            t.start()
        join_deadline = self.timeout_s + 10.0 if timeout_s is None else timeout_s
        for r, t in enumerate(threads):
            t.join(timeout=join_deadline)
            if t.is_alive():
                errors[r] = CollectiveTimeoutError(f"rank {r}: worker did not finish")
        if return_exceptions:
            return [errors[r] if errors[r] is not None else results[r]
                    for r in range(self.world_size)]
        primary = None
        for exc in errors:
            if exc is None:
                continue
            if not (isinstance(exc, CollectiveProtocolError) and exc.from_abort):
                raise exc
            primary = primary or exc
        if primary is not None:
            raise primary
        return results


# -- collective operations -------------------------------------------------


def _as_vector(v, rank: int) -> np.ndarray:
    a = np.asarray(v)
    if a.ndim != 1 or not np.issubdtype(a.dtype, np.floating):
        a = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if a.ndim != 1:
        raise CollectiveProtocolError(f"rank {rank}: collective payload must be a 1-D vector")
    return a.copy()


def _check_reply(rank: int, msg: _Message, expect_kind: str, scope_key: str, seq: int):
    if msg.kind == "abort":
        raise CollectiveProtocolError(str(msg.payload), from_abort=True)
    if msg.kind != expect_kind or msg.scope_key != scope_key or msg.seq != seq:
        raise CollectiveProtocolError(
            f"rank {rank}: expected {expect_kind}[{scope_key}#{seq}] "
            f"but received {msg.kind}[{msg.scope_key}#{msg.seq}] from rank {msg.src}"
        )


def _gather_at_root(group: DeviceGroup, root: int, peers: list[int],
                    kind: str, scope_key: str, seq: int) -> dict[int, _Message]:
    """Root-side collection of one message from each peer, with diagnosis."""
    received: dict[int, _Message] = {}
    while len(received) < len(peers):
        try:
            msg = group._recv(root, scope_key)
        except CollectiveTimeoutError:
            missing = sorted(set(peers) - set(received))
            diag = (
                f"{kind}[{scope_key}#{seq}]: root rank {root} timed out after "
                f"{group.timeout_s}s waiting for rank(s) {missing}"
            )
            _abort(group, root, received, diag)
            raise CollectiveTimeoutError(diag)
        if msg.kind == "abort":
            diag = str(msg.payload)
            _abort(group, root, received, diag)
            raise CollectiveProtocolError(diag, from_abort=True)
        if msg.kind != kind or msg.scope_key != scope_key or msg.seq != seq or msg.src in received:
            diag = (
                f"collective mismatch at root rank {root}: expected "
                f"{kind}[{scope_key}#{seq}] but rank {msg.src} sent "
                f"{msg.kind}[{msg.scope_key}#{msg.seq}]"
            )
            _abort(group, root, received, diag)
            raise CollectiveProtocolError(diag)
        received[msg.src] = msg
    return received


def _abort(group: DeviceGroup, root: int, received: dict[int, _Message], diag: str):
    for src in received:
        group._send(src, _Message(root, "abort", "", -1, diag))


def allreduce_sum(handle: DeviceHandle, scope: str, v) -> np.ndarray:
    """Elementwise sum of every rank's vector; all ranks receive the result.

    Accumulation runs in ascending rank order regardless of arrival order,
    so the result is bitwise identical on every rank and across runs.
    """
    group = handle.group
    scope_key, ranks = handle._scope_info(scope)
    seq = handle._next_seq(scope_key)
    vec = _as_vector(v, handle.rank)
    root = ranks[0]

    if handle.rank != root:
        group._send(root, _Message(handle.rank, "allreduce", scope_key, seq, vec))
        try:
            msg = group._recv(handle.rank, scope_key)
        except CollectiveTimeoutError:
            raise CollectiveTimeoutError(
                f"rank {handle.rank}: allreduce[{scope_key}#{seq}] timed out waiting "
                f"for result from root rank {root}"
            )
        _check_reply(handle.rank, msg, "result", scope_key, seq)
        return msg.payload.copy()

    peers = [r for r in ranks if r != root]
    received = _gather_at_root(group, root, peers, "allreduce", scope_key, seq)
    vectors = {root: vec, **{r: m.payload for r, m in received.items()}}
    bad = [r for r in ranks if vectors[r].shape != vec.shape or vectors[r].dtype != vec.dtype]
    if bad:
        detail = ", ".join(f"rank {r}: len {vectors[r].shape[0]} ({vectors[r].dtype})" for r in ranks)
        diag = f"allreduce[{scope_key}#{seq}]: payload mismatch across ranks ({detail})"
        _abort(group, root, received, diag)
        raise CollectiveProtocolError(diag)
    acc = vectors[ranks[0]].copy()
    for r in ranks[1:]:
        acc = acc + vectors[r]
    for r in peers:
        group._send(r, _Message(root, "result", scope_key, seq, acc.copy()))
    return acc


def broadcast(handle: DeviceHandle, scope: str, root_rank: int, v=None) -> np.ndarray:
    """Copy root's vector to every rank in the scope, bitwise.

    Only the root supplies data; other ranks must pass `v=None`.
    """
    group = handle.group
    scope_key, ranks = handle._scope_info(scope)
    if root_rank not in ranks:
        raise CollectiveProtocolError(
            f"rank {handle.rank}: broadcast root {root_rank} is outside scope "
            f"{scope_key} (ranks {ranks})"
        )
    seq = handle._next_seq(scope_key)

    if handle.rank == root_rank:
        if v is None:
            raise CollectiveProtocolError(f"rank {handle.rank}: broadcast root must supply data")
        vec = _as_vector(v, handle.rank)
        for r in ranks:
            if r != root_rank:
                group._send(r, _Message(root_rank, "broadcast", scope_key, seq, vec.copy()))
        return vec.copy()

    if v is not None:
        raise CollectiveProtocolError(
            f"rank {handle.rank}: only the broadcast root (rank {root_rank}) supplies data"
        )
    try:
        msg = group._recv(handle.rank, scope_key)
    except CollectiveTimeoutError:
        raise CollectiveTimeoutError(
            f"rank {handle.rank}: broadcast[{scope_key}#{seq}] timed out waiting "
            f"for root rank {root_rank}"
        )
    _check_reply(handle.rank, msg, "broadcast", scope_key, seq)
    return msg.payload.copy()


def barrier(handle: DeviceHandle, scope: str = SCOPE_WORLD) -> None:
    """Block until every rank in the scope has entered the barrier."""
    group = handle.group
    scope_key, ranks = handle._scope_info(scope)
    seq = handle._next_seq(scope_key)
    root = ranks[0]

    if handle.rank != root:
        group._send(root, _Message(handle.rank, "barrier", scope_key, seq))
        try:
            msg = group._recv(handle.rank, scope_key)
        except CollectiveTimeoutError:
            raise CollectiveTimeoutError(
                f"rank {handle.rank}: barrier[{scope_key}#{seq}] timed out waiting "
                f"for release from root rank {root}"
            )
        _check_reply(handle.rank, msg, "release", scope_key, seq)
        return

    peers = [r for r in ranks if r != root]
    received = _gather_at_root(group, root, peers, "barrier", scope_key, seq)
    for r in peers:
        group._send(r, _Message(root, "release", scope_key, seq))
