"""Hub-and-spoke federated training of a block-term tensor regression.

One global block is trained per round.  Every client runs the automatic
component extraction on its local residuals and reports hyperparameters
and ranks; the hub harmonises ranks to the elementwise minimum, assigns
each client its own selected (SNR, tau), aggregates the returned block
parameters by a sample-count-weighted average after sign/permutation
alignment, and broadcasts the global block.  Clients recompute their score
vector locally from the global factors and deflate their residuals; only
cores, factors, loadings, scalars, norms and sample counts ever cross the
wire.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from .bttr import Block, BttrModel, FitConfig, FitError, materialize_predictor
from .sparse_tucker import (
    AceError,
    HyperGrid,
    SparseTuckerResult,
    ace,
    collapse_response_mode,
    f_mpstd,
    finalize_block,
)
from .tensor import as_matrix, as_tensor, frobenius_norm, multilinear_product, unfold
from .transport import ClientDropout, LoopbackTransport, ProtocolError, SocketChannel
from .wire import (
    AceReport,
    BlockUpdate,
    DeflateAck,
    Done,
    ErrorCode,
    GlobalBlock,
    Hello,
    HyperAssign,
    Message,
    MessageKind,
    ProtocolErrorInfo,
)

__all__ = [
    "ClientState",
    "ServerState",
    "ClientSession",
    "aggregation_weights",
    "fedavg_reference",
    "harmonize_ranks",
    "truncate_to_ranks",
    "client_local_block",
    "client_deflate",
    "aggregate_block",
    "federated_fit_over",
    "run_federated_fit",
    "run_socket_client",
]


@dataclass
class ClientState:
    """Residuals and bookkeeping held by one client; never leaves the client."""

    client_id: int
    e_residual: np.ndarray
    f_residual: np.ndarray
    sample_count: int
    local_blocks: list = field(default_factory=list)


@dataclass
class ServerState:
    """Hub-side per-round record."""

    round: int = 0
    global_blocks: list = field(default_factory=list)
    target_ranks: tuple = ()
    client_roster: list = field(default_factory=list)  # (client_id, sample_count)


def aggregation_weights(sample_counts) -> np.ndarray:
    counts = np.asarray(sample_counts, dtype=np.float64)
    if counts.size == 0 or np.any(counts <= 0):
        raise ValueError("sample counts must be positive")
    w = counts / counts.sum()
    assert abs(w.sum() - 1.0) < 1e-12
    return w


def fedavg_reference(updates) -> np.ndarray:
    """Plain sample-count-weighted average of flat parameter vectors."""
    if not updates:
        raise ValueError("no updates to average")
    vecs = [np.asarray(v, dtype=np.float64).ravel() for v, _ in updates]
    length = vecs[0].size
    if any(v.size != length for v in vecs):
        raise ValueError("parameter vectors must have equal length")
    w = aggregation_weights([n for _, n in updates])
    return np.einsum("k,kd->d", w, np.stack(vecs))


# ---------------------------------------------------------------------------
# per-client block computation
# ---------------------------------------------------------------------------

def harmonize_ranks(reports: dict) -> tuple:
    """Elementwise-minimum target ranks plus per-client assignments.

    ``reports`` maps client id to a non-skip :class:`AceReport`.  Every
    client keeps its own selected (SNR, tau) and is told to truncate to the
    shared target ranks.
    """
    if not reports:
        raise ValueError("no reports to harmonize")
    rank_lists = [r.ranks for r in reports.values()]
    n_modes = len(rank_lists[0])
    if any(len(r) != n_modes for r in rank_lists):
        raise ProtocolError("clients reported inconsistent mode counts")
    target = tuple(max(1, min(r[m] for r in rank_lists)) for m in range(n_modes))
    assignments = {
        cid: HyperAssign(snr=rep.snr, tau=rep.tau, target_ranks=target)
        for cid, rep in reports.items()
    }
    return target, assignments


def truncate_to_ranks(res: SparseTuckerResult, target_ranks) -> SparseTuckerResult:
    """Keep the highest-contribution components per feature mode, original order."""
    if len(target_ranks) != len(res.factors):
        raise ProtocolError(
            f"assignment names {len(target_ranks)} feature modes, decomposition has {len(res.factors)}"
        )
    core = res.core
    factors = []
    for n, (f, tgt) in enumerate(zip(res.factors, target_ranks)):
        cur = f.shape[1]
        if tgt > cur:
            raise ProtocolError(f"target rank {tgt} exceeds available {cur} in mode {n + 2}")
        if tgt < cur:
            contrib = np.abs(unfold(core, n + 2)).sum(axis=1)
            keep = np.sort(np.argsort(-contrib, kind="stable")[:tgt])
            core = np.ascontiguousarray(np.take(core, keep, axis=n + 1))
            f = f[:, keep]
        factors.append(f)
    return replace(res, core=core, factors=factors)


def client_local_block(state: ClientState, assignment: HyperAssign, cfg: FitConfig,
                       cached=None, first_block: bool = False) -> BlockUpdate:
    """One local block at the assigned hyperparameters and target ranks.

    Residuals at or below the stop threshold yield a SKIP update, except
    for the first block, which is always attempted so a federation of one
    client matches the centralized fit's minimum-one-block rule.  When the
    client's own extraction already matches the assignment (single client,
    or its ranks were already the minimum) the cached result is reused;
    otherwise the decomposition is rerun and truncated.
    """
    e, f = state.e_residual, state.f_residual
    if not first_block and (
        frobenius_norm(e) <= cfg.epsilon or frobenius_norm(f) <= cfg.epsilon
    ):
        return BlockUpdate(skip=True, n_samples=state.sample_count)

    reuse = (
        cached is not None
        and cached.snr_star == assignment.snr
        and cached.tau_star == assignment.tau
        and tuple(fac.shape[1] for fac in cached.factors) == tuple(assignment.target_ranks)
    )
    if reuse:
        t, block_core, score_core = cached.t, cached.block_core, cached.score_core
        factors, q = cached.factors, cached.q
    else:
        res = f_mpstd(e, f, snr=assignment.snr, tau=assignment.tau, rank_cap=cfg.rank_cap)
        res = collapse_response_mode(res)
        res = truncate_to_ranks(res, assignment.target_ranks)
        t, block_core, score_core = finalize_block(e, res)
        factors, q = res.factors, res.q

    q = q / np.linalg.norm(q)
    u = f @ q
    d = float((u.T @ t).item())
    return BlockUpdate(
        skip=False,
        n_samples=state.sample_count,
        core=block_core,
        score_core=score_core,
        factors=list(factors),
        q=q,
        d=d,
    )


def client_deflate(state: ClientState, gb: GlobalBlock) -> tuple:
    """Deflate local residuals against the broadcast global block.

    The score vector is recomputed locally from the global factors and
    score core, the predictor residual loses its own projection onto
    (t, factors), and the response residual is deflated with the global
    loading but the locally fitted coefficient.  Returns the updated state
    and the acknowledgement carrying residual norms only.
    """
    e, f = state.e_residual, state.f_residual
    res = SparseTuckerResult(core=gb.score_core, q=gb.q, factors=list(gb.factors),
                             snr=0.0, tau=100.0)
    try:
        t, local_core, _ = finalize_block(e, res)
    except AceError:
        # residual has no component along the global block; nothing to remove
        ack = DeflateAck(e_norm=frobenius_norm(e), f_norm=frobenius_norm(f), deflated=False)
        return state, ack
    u = f @ gb.q
    d_local = float((u.T @ t).item())
    fmap = {1: t}
    fmap.update({n + 2: fac for n, fac in enumerate(gb.factors)})
    new_e = e - multilinear_product(local_core, fmap)
    new_f = f - d_local * (t @ gb.q.T)
    state = replace(
        state,
        e_residual=new_e,
        f_residual=new_f,
        local_blocks=state.local_blocks + [
            Block(core=gb.core, factors=list(gb.factors), q=gb.q, d=d_local,
                  score_core=gb.score_core, t=t)
        ],
    )
    ack = DeflateAck(e_norm=frobenius_norm(new_e), f_norm=frobenius_norm(new_f))
    return state, ack


# ---------------------------------------------------------------------------
# aggregation
# ---------------------------------------------------------------------------

def _greedy_column_match(ref: np.ndarray, cand: np.ndarray) -> np.ndarray:
    """Permutation of cand columns maximising summed |inner product| with ref, greedily."""
    r = ref.shape[1]
    scores = np.abs(ref.T @ cand)
    perm = np.full(r, -1, dtype=int)
    used_ref, used_cand = set(), set()
    flat_order = np.argsort(-scores, axis=None, kind="stable")
    for flat in flat_order:
        i, j = divmod(int(flat), r)
        if i in used_ref or j in used_cand:
            continue
        perm[i] = j
        used_ref.add(i)
        used_cand.add(j)
        if len(used_ref) == r:
            break
    return perm


def _align_update(ref: BlockUpdate, upd: BlockUpdate) -> BlockUpdate:
    """Resolve sign and column-permutation ambiguity against the reference update."""
    core = upd.core.copy()
    score_core = upd.score_core.copy()
    factors = []
    for n, (rf, uf) in enumerate(zip(ref.factors, upd.factors)):
        axis = n + 1
        perm = _greedy_column_match(rf, uf)
        uf = uf[:, perm]
        core = np.take(core, perm, axis=axis)
        score_core = np.take(score_core, perm, axis=axis)
        signs = np.sign(np.sum(rf * uf, axis=0))
        signs[signs == 0] = 1.0
        uf = uf * signs
        shape = [1] * core.ndim
        shape[axis] = len(signs)
        core = core * signs.reshape(shape)
        score_core = score_core * signs.reshape(shape)
        factors.append(uf)
    q = upd.q
    d = upd.d
    if float(np.sum(ref.q * q)) < 0:
        # flipping the response loading flips the score map, hence the score,
        # hence the block core; d = u't is invariant
        q = -q
        score_core = -score_core
        core = -core
    return BlockUpdate(skip=False, n_samples=upd.n_samples, core=core,
                       score_core=score_core, factors=factors, q=q, d=d)


def aggregate_block(updates) -> GlobalBlock:
    """Sample-count-weighted average of aligned block updates.

    Updates must share shapes (guaranteed by rank harmonisation).  Averaged
    factors are re-orthonormalised by a thin QR with the triangular
    correction absorbed into both cores; the averaged loading is rescaled
    to unit norm with the scale absorbed into the coefficient.
    """
    updates = list(updates)
    if not updates:
        raise ValueError("no updates to aggregate")
    ref = updates[0]
    for u in updates[1:]:
        if u.core.shape != ref.core.shape or u.q.shape != ref.q.shape or any(
            a.shape != b.shape for a, b in zip(u.factors, ref.factors)
        ):
            raise ProtocolError("block update shapes differ; harmonization was violated")
    aligned = [ref] + [_align_update(ref, u) for u in updates[1:]]
    w = aggregation_weights([u.n_samples for u in updates])

    core = sum(wi * u.core for wi, u in zip(w, aligned))
    score_core = sum(wi * u.score_core for wi, u in zip(w, aligned))
    q = sum(wi * u.q for wi, u in zip(w, aligned))
    d = float(sum(wi * u.d for wi, u in zip(w, aligned)))
    factors = [
        sum(wi * u.factors[n] for wi, u in zip(w, aligned))
        for n in range(len(ref.factors))
    ]

    ortho = []
    for n, fbar in enumerate(factors):
        qmat, rmat = np.linalg.qr(fbar)
        signs = np.sign(np.diag(rmat))
        signs[signs == 0] = 1.0
        qmat = qmat * signs
        rmat = rmat * signs[:, None]
        core = multilinear_product(core, {n + 2: rmat})
        score_core = multilinear_product(score_core, {n + 2: rmat})
        ortho.append(qmat)

    q_norm = float(np.linalg.norm(q))
    if q_norm == 0.0:
        raise ProtocolError("aggregated response loading vanished")
    q = q / q_norm
    d = d * q_norm
    return GlobalBlock(core=core, score_core=score_core, factors=ortho, q=q, d=d)


# ---------------------------------------------------------------------------
# client session state machine
# ---------------------------------------------------------------------------

class ClientSession:
    """Client-side protocol driver: pure function of state and inbound message."""

    def __init__(self, client_id: int, x, y):
        x = as_tensor(x, min_order=2)
        y = as_matrix(y)
        if y.shape[0] != x.shape[0]:
            raise ValueError("sample count mismatch between x and y")
        self.state = ClientState(
            client_id=client_id,
            e_residual=x.copy(),
            f_residual=y.copy(),
            sample_count=x.shape[0],
        )
        self.feature_shape = tuple(x.shape[1:])
        self.n_responses = y.shape[1]
        self.cfg: Optional[FitConfig] = None
        self.done = False
        self._ace_cache = {}

    def hello(self) -> Message:
        return Message(
            kind=MessageKind.HELLO,
            round=0,
            client_id=self.state.client_id,
            payload=Hello(
                sample_count=self.state.sample_count,
                feature_shape=self.feature_shape,
                n_responses=self.n_responses,
            ),
        )

    def _msg(self, kind, rnd, payload) -> Message:
        return Message(kind=kind, round=rnd, client_id=self.state.client_id, payload=payload)

    def _ace_report(self, rnd: int) -> Message:
        e, f = self.state.e_residual, self.state.f_residual
        if rnd > 1 and (
            frobenius_norm(e) <= self.cfg.epsilon or frobenius_norm(f) <= self.cfg.epsilon
        ):
            return self._msg(MessageKind.ACE_REPORT, rnd, AceReport(skip=True))
        try:
            result = ace(e, f, self.cfg.grid, rank_cap=self.cfg.rank_cap)
        except AceError:
            return self._msg(MessageKind.ACE_REPORT, rnd, AceReport(skip=True))
        self._ace_cache[rnd] = result
        report = AceReport(
            skip=False,
            snr=result.snr_star,
            tau=result.tau_star,
            bic=result.bic,
            ranks=tuple(fac.shape[1] for fac in result.factors),
        )
        return self._msg(MessageKind.ACE_REPORT, rnd, report)

    def handle(self, msg: Message) -> list:
        if msg.kind == MessageKind.HELLO:
            p = msg.payload
            self.state.client_id = msg.client_id
            self.cfg = FitConfig(
                max_blocks=p.max_blocks,
                epsilon=p.epsilon,
                grid=HyperGrid(snr_values=p.snr_values, tau_values=p.tau_values),
            )
            return [self._ace_report(1)]
        if msg.kind == MessageKind.HYPER_ASSIGN:
            try:
                update = client_local_block(
                    self.state, msg.payload, self.cfg,
                    cached=self._ace_cache.get(msg.round),
                    first_block=msg.round == 1,
                )
            except (AceError, ProtocolError, ValueError) as e:
                info = ProtocolErrorInfo(code=int(ErrorCode.DECOMPOSITION_FAILED), detail=str(e))
                return [self._msg(MessageKind.ERROR, msg.round, info)]
            return [self._msg(MessageKind.BLOCK_UPDATE, msg.round, update)]
        if msg.kind == MessageKind.GLOBAL_BLOCK:
            e, f = self.state.e_residual, self.state.f_residual
            if frobenius_norm(e) <= self.cfg.epsilon or frobenius_norm(f) <= self.cfg.epsilon:
                ack = DeflateAck(e_norm=frobenius_norm(e), f_norm=frobenius_norm(f), deflated=False)
            else:
                self.state, ack = client_deflate(self.state, msg.payload)
            out = [self._msg(MessageKind.DEFLATE_ACK, msg.round, ack)]
            if msg.round < self.cfg.max_blocks:
                out.append(self._ace_report(msg.round + 1))
            return out
        if msg.kind == MessageKind.DONE:
            self.done = True
            return []
        if msg.kind == MessageKind.ERROR:
            if msg.payload.code == ErrorCode.RETRY_ROUND:
                return [self._ace_report(msg.round)]
            self.done = True
            return []
        raise ProtocolError(f"client cannot handle message kind {msg.kind}")


# ---------------------------------------------------------------------------
# hub orchestration
# ---------------------------------------------------------------------------

def _recv_expect(transport, cid: int, kinds, rnd: int, max_stale: int = 16) -> Message:
    """Next message of an expected kind, discarding stale frames from aborted rounds."""
    for _ in range(max_stale):
        msg = transport.recv(cid)
        if msg.kind in kinds and msg.round == rnd:
            return msg
        if msg.kind == MessageKind.ERROR:
            return msg
    raise ProtocolError(f"client {cid} flooded unexpected messages")


def _handshake(transport, cfg: FitConfig) -> tuple:
    roster = []
    feature_shape = None
    n_responses = None
    for cid in transport.client_ids():
        msg = _recv_expect(transport, cid, {MessageKind.HELLO}, 0)
        if msg.kind != MessageKind.HELLO:
            raise ProtocolError(f"client {cid} failed handshake")
        p = msg.payload
        if feature_shape is None:
            feature_shape, n_responses = p.feature_shape, p.n_responses
        elif p.feature_shape != feature_shape or p.n_responses != n_responses:
            raise ProtocolError(
                f"client {cid} shapes {p.feature_shape}/{p.n_responses} differ from "
                f"{feature_shape}/{n_responses}; horizontal federation requires a shared feature space"
            )
        roster.append((cid, p.sample_count))
    reply = Hello(
        max_blocks=cfg.max_blocks,
        epsilon=cfg.epsilon,
        snr_values=tuple(cfg.grid.snr_values),
        tau_values=tuple(cfg.grid.tau_values),
    )
    for cid, _ in roster:
        transport.send(cid, Message(MessageKind.HELLO, 0, cid, reply))
    return roster, feature_shape, n_responses


def _collect_reports(transport, live, rnd: int) -> dict:
    reports = {}
    for cid in live:
        msg = _recv_expect(transport, cid, {MessageKind.ACE_REPORT}, rnd)
        if msg.kind == MessageKind.ERROR:
            reports[cid] = AceReport(skip=True)
        else:
            reports[cid] = msg.payload
    return reports


def _run_round(transport, live, rnd: int, state: ServerState):
    """One full round; returns the aggregated block or None when every client skipped."""
    reports = _collect_reports(transport, live, rnd)
    active = {cid: r for cid, r in reports.items() if not r.skip}
    if not active:
        return None
    target, assignments = harmonize_ranks(active)
    state.target_ranks = target
    for cid in active:
        transport.send(cid, Message(MessageKind.HYPER_ASSIGN, rnd, cid, assignments[cid]))
    updates = []
    for cid in sorted(active):
        msg = _recv_expect(transport, cid, {MessageKind.BLOCK_UPDATE}, rnd)
        if msg.kind == MessageKind.ERROR or msg.payload.skip:
            continue  # excluded from aggregation this round
        updates.append(msg.payload)
    if not updates:
        return None
    return aggregate_block(updates)


def federated_fit_over(transport, cfg: FitConfig) -> BttrModel:
    """Drive the hub protocol over an already-connected transport."""
    state = ServerState()
    roster, feature_shape, _ = _handshake(transport, cfg)
    state.client_roster = roster

    rnd = 0
    while rnd < cfg.max_blocks:
        rnd += 1
        state.round = rnd
        live = transport.client_ids()
        if not live:
            raise ProtocolError("all clients dropped out")
        retried = False
        while True:
            try:
                gb = _run_round(transport, live, rnd, state)
                break
            except ClientDropout as drop:
                if retried:
                    transport.drop(drop.client_id)
                    live = [cid for cid in live if cid != drop.client_id]
                    if not live:
                        raise ProtocolError("all clients dropped out") from drop
                retried = True
                for cid in live:
                    if cid == drop.client_id and drop.client_id not in transport.client_ids():
                        continue
                    try:
                        transport.drain(cid)
                        transport.send(cid, Message(
                            MessageKind.ERROR, rnd, cid,
                            ProtocolErrorInfo(code=int(ErrorCode.RETRY_ROUND), detail="round aborted"),
                        ))
                    except ClientDropout:
                        transport.drop(cid)
                        live = [c for c in live if c != cid]
        if gb is None:
            break
        state.global_blocks.append(gb)
        # broadcast and wait at the deflation barrier; the round is committed,
        # so a failure here only excludes that client from future rounds
        for cid in list(live):
            try:
                transport.send(cid, Message(MessageKind.GLOBAL_BLOCK, rnd, cid, gb))
            except ClientDropout:
                transport.drop(cid)
        for cid in transport.client_ids():
            try:
                _recv_expect(transport, cid, {MessageKind.DEFLATE_ACK}, rnd)
            except ClientDropout:
                transport.drop(cid)

    for cid in transport.client_ids():
        try:
            transport.send(cid, Message(
                MessageKind.DONE, state.round, cid, Done(blocks_extracted=len(state.global_blocks))
            ))
        except ClientDropout:
            transport.drop(cid)

    if not state.global_blocks:
        raise FitError("no block could be extracted on any client")
    blocks = [
        Block(core=gb.core, factors=list(gb.factors), q=gb.q, d=gb.d,
              score_core=gb.score_core, t=None)
        for gb in state.global_blocks
    ]
    w, z = materialize_predictor(blocks, feature_shape)
    return BttrModel(blocks=blocks, w=w, z=z, input_shape=tuple(feature_shape))


def run_federated_fit(clients, cfg: FitConfig, transport=None) -> BttrModel:
    """Train a global model across client datasets.

    ``clients`` is a sequence of (x, y) pairs sharing feature and response
    spaces.  Without an explicit transport the clients run in-process over
    the loopback transport; passing a connected server transport ignores
    ``clients`` and drives the remote peers instead.
    """
    if transport is None:
        if not clients:
            raise ValueError("need at least one client")
        sessions = {cid: ClientSession(cid, x, y) for cid, (x, y) in enumerate(clients)}
        transport = LoopbackTransport(sessions)
    return federated_fit_over(transport, cfg)


def run_socket_client(host: str, port: int, x, y,
                      round_timeout: float = 120.0, heartbeat: float = 5.0) -> ClientState:
    """Connect to a hub and participate until the protocol completes."""
    import socket as _socket

    sock = _socket.create_connection((host, port))
    sock.setsockopt(_socket.IPPROTO_TCP, _socket.TCP_NODELAY, 1)
    channel = SocketChannel(sock, heartbeat=heartbeat)
    session = ClientSession(0, x, y)
    try:
        channel.send(session.hello())
        while not session.done:
            msg = channel.recv(timeout=round_timeout)
            for out in session.handle(msg):
                channel.send(out)
    finally:
        channel.close()
    return session.state
