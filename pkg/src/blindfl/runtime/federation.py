"""Round orchestration over a transport.

Nodes: the server (id 0), clients 1..C and the key distributor.  Every
exchange is an encoded frame pushed through the transport and logged, so
byte metrics are exact frame sums.  With the in-process transport, frames
are dispatched node by node in id order, which makes runs reproducible.
"""

from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import fhe
from ..keydist import SERVER, Kind as KdKind, KeyDistributor, RoundEvent
from ..model import ModelParams
from ..segmentation import (
    ClientResponse,
    RequestMatrix,
    aggregate_encrypted,
    aggregate_plain,
    full_request_matrix,
    generate_request_matrix,
)
from ..training import (
    Dataset,
    MlpSpec,
    evaluate,
    gaussian_blobs,
    load_idx_dataset,
    local_train,
    loss,
    partition,
    stack,
    synthetic_digits,
)
from .codec import (
    FRAME_OVERHEAD,
    Kind,
    WireMessage,
    decode_client_list,
    decode_matrices,
    decode_message,
    decode_request_row,
    encode_client_list,
    encode_encrypted_matrices,
    encode_message,
    encode_plain_matrices,
    encode_request_row,
)
from .config import FederationConfig
from .transport import InProcessTransport, Transport, make_transport

logger = logging.getLogger(__name__)

SERVER_NODE = SERVER
KD_NODE = 2**32 - 1

METRIC_COLUMNS = (
    "round",
    "mean_accuracy",
    "agg_time_ms",
    "enc_time_ms",
    "dec_time_ms",
    "bytes_up_mean",
    "bytes_up_max",
    "bytes_down_mean",
)


class FederationError(RuntimeError):
    def __init__(self, message: str, metrics: Sequence["RoundMetrics"] = ()):
        super().__init__(message)
        self.metrics = list(metrics)


class PlaintextLeak(FederationError):
    """A plaintext update reached the server while encryption is on."""


class RoundTimeout(FederationError):
    pass


@dataclass(frozen=True)
class FrameRecord:
    round_id: int
    kind: Kind
    sender: int
    dest: int
    length: int

    @property
    def payload_length(self) -> int:
        return self.length - FRAME_OVERHEAD


def account_bytes(records: Iterable[FrameRecord], direction: str, framing: bool = True) -> dict[int, int]:
    """Per-client byte totals.

    ``up`` counts ClientUpdate frames by sender; ``down`` counts every frame
    delivered to a client.  With ``framing=False`` only payload bytes count.
    """
    out: dict[int, int] = {}
    for r in records:
        size = r.length if framing else r.payload_length
        if direction == "up":
            if r.kind is Kind.CLIENT_UPDATE:
                out[r.sender] = out.get(r.sender, 0) + size
        elif direction == "down":
            if r.dest not in (SERVER_NODE, KD_NODE):
                out[r.dest] = out.get(r.dest, 0) + size
        else:
            raise ValueError(f"direction must be 'up' or 'down', got {direction!r}")
    return out


@dataclass
class RoundMetrics:
    round: int
    selected: tuple[int, ...]
    accuracy: dict[int, float]
    agg_time_ms: float
    enc_time_ms: float
    dec_time_ms: float
    bytes_up: dict[int, int]
    bytes_down: dict[int, int]
    train_loss: float

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values())))

    @property
    def bytes_up_mean(self) -> float:
        return float(np.mean(list(self.bytes_up.values()))) if self.bytes_up else 0.0

    @property
    def bytes_up_max(self) -> int:
        return max(self.bytes_up.values(), default=0)

    @property
    def bytes_down_mean(self) -> float:
        return float(np.mean(list(self.bytes_down.values()))) if self.bytes_down else 0.0

    def row(self, deterministic: bool = False) -> list[str]:
        times = (0.0, 0.0, 0.0) if deterministic else (self.agg_time_ms, self.enc_time_ms, self.dec_time_ms)
        return [
            str(self.round),
            f"{self.mean_accuracy:.6f}",
            *(f"{t:.3f}" for t in times),
            f"{self.bytes_up_mean:.1f}",
            str(self.bytes_up_max),
            f"{self.bytes_down_mean:.1f}",
        ]


def metrics_csv(metrics: Sequence[RoundMetrics], deterministic: bool = False) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRIC_COLUMNS)
    for m in metrics:
        w.writerow(m.row(deterministic))
    return buf.getvalue()


# -- data ------------------------------------------------------------------------------


def load_dataset(cfg: FederationConfig, rng: np.random.Generator) -> Dataset:
    if cfg.dataset == "digits":
        return synthetic_digits(cfg.samples, rng, noise=cfg.noise)
    if cfg.dataset == "blobs":
        return gaussian_blobs(cfg.samples, 16, 4, rng, spread=1.0 + 4 * cfg.noise)
    return load_idx_dataset(cfg.idx_images, cfg.idx_labels, limit=cfg.samples)


def model_spec(cfg: FederationConfig, data: Dataset) -> MlpSpec:
    return MlpSpec((data.dim, *cfg.hidden, data.num_classes), cfg.activation)


# -- nodes -----------------------------------------------------------------------------


class _Node:
    def __init__(self, fed: "Federation", node_id: int):
        self.fed = fed
        self.id = node_id

    def send(self, dest: int, kind: Kind, payload: bytes = b"") -> None:
        self.fed.send(WireMessage(kind, self.fed.round_id, self.id, payload), dest)

    def on_message(self, msg: WireMessage) -> None:
        raise NotImplementedError


class ClientNode(_Node):
    def __init__(self, fed, node_id: int, train: Dataset, test: Dataset, model: ModelParams):
        super().__init__(fed, node_id)
        self.train = train
        self.test = test
        self.model = model
        self.reset()

    def reset(self) -> None:
        self.pk = None
        self.sk = None
        self.row = None
        self.global_payload = None
        self.submitted = False
        self.installed = False
        self.enc_ms = 0.0
        self.dec_ms = 0.0
        self.sent_model = None

    def on_message(self, msg: WireMessage) -> None:
        fed = self.fed
        if msg.kind is Kind.PUBLIC_KEY:
            self.pk = fhe.deserialize_public_key(msg.payload)
            if self.pk.round_id != fed.round_id:
                raise fhe.KeyRoundError("public key from another round")
            # echo to the server, which takes its ciphertext context from it
            self.send(SERVER_NODE, Kind.PUBLIC_KEY, msg.payload)
        elif msg.kind is Kind.REQUEST_ROW:
            self.row = decode_request_row(msg.payload)
        elif msg.kind is Kind.PRIVATE_KEY:
            self.sk = fhe.deserialize_secret_key(msg.payload)
        elif msg.kind is Kind.GLOBAL_MODEL:
            self.global_payload = msg.payload
        else:
            raise FederationError(f"client {self.id} cannot handle {msg.kind.name}")
        self._advance()

    def _advance(self) -> None:
        fed = self.fed
        if not self.submitted and self.row is not None and (fed.params is None or self.pk is not None):
            self._train_and_submit()
        if not self.installed and self.global_payload is not None and (fed.params is None or self.sk is not None):
            self._install()

    def _train_and_submit(self) -> None:
        fed = self.fed
        cfg = fed.config
        rng = np.random.default_rng([cfg.seed, fed.round_id, self.id, 1])
        trained, t = local_train(fed.spec, self.model, self.train, cfg.epochs, cfg.lr, rng, cfg.batch_size)
        self.sent_model = trained
        chosen = [trained[j] for j in range(1, len(trained) + 1) if self.row[j - 1]]
        if fed.params is None:
            payload = encode_plain_matrices(chosen, t)
        else:
            enc_rng = np.random.default_rng([cfg.seed, fed.round_id, self.id, 2])
            start = time.perf_counter()
            encrypted = [fhe.encrypt_matrix(self.pk, m, enc_rng) for m in chosen]
            self.enc_ms = 1e3 * (time.perf_counter() - start)
            payload = encode_encrypted_matrices(encrypted, t)
        self.submitted = True
        self.send(SERVER_NODE, Kind.CLIENT_UPDATE, payload)

    def _install(self) -> None:
        fed = self.fed
        if fed.params is None:
            decoded = decode_matrices(self.global_payload)
            mats = decoded.matrices
        else:
            decoded = decode_matrices(self.global_payload, self.sk.params)
            if not decoded.encrypted:
                raise FederationError("global model arrived unencrypted")
            start = time.perf_counter()
            mats = tuple(fhe.decrypt_matrix(self.sk, em) for em in decoded.matrices)
            self.dec_ms = 1e3 * (time.perf_counter() - start)
        self.model = ModelParams(mats)
        fed.spec.check(self.model)
        self.installed = True


class ServerNode(_Node):
    def __init__(self, fed):
        super().__init__(fed, SERVER_NODE)
        self.reset()

    def reset(self) -> None:
        self.R: RequestMatrix | None = None
        self.positions: dict[int, int] = {}
        self.updates: dict[int, WireMessage] = {}
        self.echoed: dict[int, fhe.PublicKey] = {}
        self.agg_ms = 0.0
        self.responses: list[ClientResponse] = []
        self.done = False

    def start(self, selected: Sequence[int], M: int) -> None:
        fed = self.fed
        c = len(selected)
        self.positions = {cid: k + 1 for k, cid in enumerate(selected)}
        if fed.config.segmentation:
            rng = np.random.default_rng([fed.config.seed, fed.round_id, 0xA11])
            self.R = generate_request_matrix(M, c, fed.config.p, rng)
        else:
            self.R = full_request_matrix(M, c)
        for cid in selected:
            self.send(cid, Kind.REQUEST_ROW, encode_request_row(self.R.row(self.positions[cid])))

    def on_message(self, msg: WireMessage) -> None:
        if msg.sender not in self.positions:
            raise FederationError(f"server got {msg.kind.name} from unselected node {msg.sender}")
        if msg.kind is Kind.PUBLIC_KEY:
            self.echoed[msg.sender] = fhe.deserialize_public_key(msg.payload)
        elif msg.kind is Kind.CLIENT_UPDATE:
            if msg.sender in self.updates:
                raise FederationError(f"second update from client {msg.sender}")
            self.updates[msg.sender] = msg
        else:
            raise FederationError(f"server cannot handle {msg.kind.name}")
        if len(self.updates) == len(self.positions) and not self.done:
            self._aggregate()

    def _context(self) -> fhe.FheParams:
        prints = {fhe.key_fingerprint(pk) for pk in self.echoed.values()}
        if len(self.echoed) != len(self.positions) or len(prints) != 1:
            raise FederationError("clients did not all echo the same public key")
        pk = next(iter(self.echoed.values()))
        if pk.round_id != self.fed.round_id:
            raise fhe.KeyRoundError("echoed key belongs to another round")
        return pk.params

    def _aggregate(self) -> None:
        fed = self.fed
        params = None if fed.params is None else self._context()
        responses = []
        for cid, msg in sorted(self.updates.items()):
            decoded = decode_matrices(msg.payload, params)
            if params is not None and not decoded.encrypted:
                raise PlaintextLeak(f"client {cid} sent plaintext weights to the server")
            support = {j + 1 for j in np.flatnonzero(self.R.row(self.positions[cid]))}
            sent = {m.index for m in decoded.matrices}
            if not sent <= support:
                raise FederationError(f"client {cid} sent unrequested matrices {sorted(sent - support)}")
            sel = tuple((m.index, m) for m in decoded.matrices)
            responses.append(ClientResponse(self.positions[cid], sel, decoded.t))
        self.responses = responses
        start = time.perf_counter()
        if params is None:
            W = aggregate_plain(responses, self.R, fed.M)
            payload = encode_plain_matrices(list(W))
        else:
            enc = aggregate_encrypted(responses, self.R, fed.M, round_id=fed.round_id)
            payload = encode_encrypted_matrices(enc)
        self.agg_ms = 1e3 * (time.perf_counter() - start)
        self.done = True
        if params is not None:
            self.send(KD_NODE, Kind.AGGREGATION_COMPLETE, encode_client_list(sorted(self.updates)))
        for cid in fed.client_ids:
            self.send(cid, Kind.GLOBAL_MODEL, payload)


class KdNode(_Node):
    def __init__(self, fed, params: fhe.FheParams, clients: Sequence[int], seed):
        super().__init__(fed, KD_NODE)
        self.kd = KeyDistributor(params, clients, seed=seed)

    def start(self, selected: Sequence[int], recipients: Sequence[int]) -> None:
        round_id, _ = self.kd.fresh_round(selected, recipients)
        if round_id != self.fed.round_id:
            raise FederationError(f"key distributor at round {round_id}, federation at {self.fed.round_id}")
        for cid in selected:
            pk = self.kd.public_key_for(cid)
            self.send(cid, Kind.PUBLIC_KEY, fhe.serialize_public_key(pk))

    def on_message(self, msg: WireMessage) -> None:
        if msg.kind is not Kind.AGGREGATION_COMPLETE:
            raise FederationError(f"key distributor cannot handle {msg.kind.name}")
        before = self.kd.state
        if msg.sender == SERVER_NODE:
            for cid in decode_client_list(msg.payload):
                self.kd.handle(RoundEvent(KdKind.UPDATE_SUBMITTED, self.fed.round_id, cid))
        self.kd.handle(RoundEvent(KdKind.AGGREGATION_COMPLETE, self.fed.round_id, msg.sender))
        if self.kd.state.key_released and not before.key_released:
            for cid in sorted(self.kd.state.recipients):
                sk = self.kd.private_key_for(cid)
                self.send(cid, Kind.PRIVATE_KEY, fhe.serialize_secret_key(sk))

    def finish(self) -> None:
        self.kd.handle(RoundEvent(KdKind.MODEL_DISTRIBUTED, self.fed.round_id, SERVER))


# -- federation ------------------------------------------------------------------------


class Federation:
    """One configured federation; call :meth:`run_round` repeatedly."""

    def __init__(self, config: FederationConfig, transport: Transport | None = None, data: Dataset | None = None):
        self.config = config
        self.params = config.fhe_params()
        root = np.random.default_rng([config.seed, 0xDA7A])
        self.data = data if data is not None else load_dataset(config, root)
        if len(self.data) < config.clients:
            raise FederationError("fewer samples than clients")
        self.spec = model_spec(config, self.data)
        self.M = self.spec.num_matrices
        self.round_id = 0
        self.frames: list[FrameRecord] = []
        self.transport = transport if transport is not None else make_transport(config.transport)
        self._owns_transport = transport is None
        self.client_ids = list(range(1, config.clients + 1))
        init = self.spec.init(np.random.default_rng([config.seed, 0x1A17]))
        parts = partition(self.data, config.clients, root)
        self.server = ServerNode(self)
        self.clients: dict[int, ClientNode] = {}
        for cid, part in zip(self.client_ids, parts):
            train, test = part.split(config.test_fraction)
            self.clients[cid] = ClientNode(self, cid, train, test, init)
        self.kd = KdNode(self, self.params, self.client_ids, config.seed) if self.params else None
        self._nodes = [self.server, *self.clients.values()] + ([self.kd] if self.kd else [])
        for node in self._nodes:
            self.transport.register(node.id)

    # transport plumbing

    def send(self, msg: WireMessage, dest: int) -> None:
        frame = encode_message(msg, self.config.frame_cap)
        self.frames.append(FrameRecord(msg.round_id, msg.kind, msg.sender, dest, len(frame)))
        self.transport.send(dest, frame)

    def _pump(self, done: Callable[[], bool]) -> None:
        deadline = time.monotonic() + self.config.timeout
        in_process = isinstance(self.transport, InProcessTransport)
        while not done():
            progressed = False
            for node in self._nodes:
                while (frame := self.transport.recv(node.id)) is not None:
                    msg = decode_message(frame, self.config.frame_cap, expected_round=self.round_id)
                    node.on_message(msg)
                    progressed = True
            if progressed:
                deadline = time.monotonic() + self.config.timeout
                continue
            if in_process:
                raise FederationError(f"round {self.round_id} stalled with no messages in flight")
            if time.monotonic() > deadline:
                raise RoundTimeout(f"round {self.round_id} made no progress for {self.config.timeout}s")
            time.sleep(0.0005)

    def select_clients(self) -> list[int]:
        rng = np.random.default_rng([self.config.seed, self.round_id, 0x5E1])
        order = rng.permutation(self.client_ids)
        return sorted(int(c) for c in order[: self.config.selected])

    def run_round(self) -> RoundMetrics:
        self.round_id += 1
        first_frame = len(self.frames)
        selected = self.select_clients()
        self.server.reset()
        for client in self.clients.values():
            client.reset()
        if self.kd:
            self.kd.start(selected, self.client_ids)
        self.server.start(selected, self.M)
        self._pump(lambda: all(c.installed for c in self.clients.values()))
        if self.kd:
            self.kd.finish()
        records = self.frames[first_frame:]
        cs = [self.clients[c] for c in selected]
        model = self.clients[self.client_ids[0]].model
        train_all = stack([c.train for c in self.clients.values() if len(c.train)])
        return RoundMetrics(
            round=self.round_id,
            selected=tuple(selected),
            accuracy={cid: evaluate(self.spec, c.model, c.test) for cid, c in self.clients.items()},
            agg_time_ms=self.server.agg_ms,
            enc_time_ms=float(np.mean([c.enc_ms for c in cs])),
            dec_time_ms=float(np.mean([c.dec_ms for c in self.clients.values()])),
            bytes_up=account_bytes(records, "up"),
            bytes_down=account_bytes(records, "down"),
            train_loss=loss(self.spec, model, train_all.x, train_all.y),
        )

    def global_model(self) -> ModelParams:
        return self.clients[self.client_ids[0]].model

    def close(self) -> None:
        if self._owns_transport:
            self.transport.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_experiment(
    config: FederationConfig,
    on_round: Callable[[RoundMetrics], None] | None = None,
    data: Dataset | None = None,
) -> list[RoundMetrics]:
    """Run every configured round; a failure carries the metrics gathered so far."""
    metrics: list[RoundMetrics] = []
    with Federation(config, data=data) as fed:
        for _ in range(config.rounds):
            try:
                m = fed.run_round()
            except FederationError as exc:
                exc.metrics = list(metrics)
                raise
            except Exception as exc:
                raise FederationError(f"round {fed.round_id} failed: {exc}", metrics) from exc
            metrics.append(m)
            logger.info("round %d mean accuracy %.4f", m.round, m.mean_accuracy)
            if on_round:
                on_round(m)
    return metrics
