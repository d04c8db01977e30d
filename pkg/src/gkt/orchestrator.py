"""Training loops: GKT (sync and async), FedAvg and the centralized baseline.

A GKT run is a coordinator that owns the server model plus one session per
client. They only talk through :mod:`gkt.protocol` connections, so the same
code runs over in-process queues and over TCP. Per round a client trains its
edge model, sends an :class:`EvalReport` (training losses and test-set
features) followed by its :class:`ClientUpload`, and later receives a
:class:`ServerDownload` with the server logits for the batches it uploaded.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import queue
import threading
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, NamedTuple, Optional, Sequence

import numpy as np

from . import accounting
from .data import BatchCursor, Dataset, PartitionPlan, augment, round_batches
from .distillation import client_loss, cross_entropy, server_loss
from .models import (
    EdgeModel,
    FullModel,
    ModelSpec,
    ServerModel,
    assemble_deployed_model,
    build_full_model,
    spec_hash,
)
from .protocol import (
    Bye,
    ClientUpload,
    Connection,
    DownloadBatch,
    ErrorCode,
    ErrorMessage,
    EvalReport,
    Hello,
    HandshakeError,
    ProtocolDesyncError,
    ProtocolError,
    RoundBegin,
    ServerDownload,
    TcpListener,
    TransportTimeoutError,
    UploadBatch,
    inprocess_pair,
    measure_bytes,
    payload_bytes,
    tcp_connect,
)
from .tensor import SGD, Adam, Optimizer, Tape, Tensor

log = logging.getLogger(__name__)

CSV_COLUMNS = ("round", "test_acc", "server_loss", "mean_client_ce", "mean_client_kd", "bytes_up", "bytes_down",
               "flops_edge", "flops_server", "wall_ms")
KD_MODES = ("none", "server_to_edge_only", "both")
CLIENT_FAILURE = 100


class DivergenceError(ArithmeticError):
    """A training loss became NaN or infinite."""


class BarrierTimeoutError(TransportTimeoutError):
    pass


class ConfigError(ValueError):
    def __init__(self, problems: Sequence[str]):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.problems))


def derive_seed(*keys: int) -> int:
    """Independent 32-bit seed for one named random stream."""
    return int(np.random.SeedSequence([int(k) for k in keys]).generate_state(1)[0])


# -- configuration -----------------------------------------------------------

class KdSwitch(NamedTuple):
    client: bool
    server: bool


def ablation_kd_mode(mode: str) -> KdSwitch:
    """Which of the two losses keep their KD term."""
    if mode == "none":
        return KdSwitch(False, False)
    if mode == "server_to_edge_only":
        return KdSwitch(True, False)
    if mode == "both":
        return KdSwitch(True, True)
    raise ValueError(f"unknown kd mode {mode!r}; expected one of {', '.join(KD_MODES)}")


@dataclass(frozen=True)
class OptimizerSpec:
    name: str = "adam"
    lr: float = 1e-3
    momentum: float = 0.9
    weight_decay: float = 1e-4

    def problems(self, label: str) -> list[str]:
        out = []
        if self.name not in ("adam", "sgd"):
            out.append(f"{label}: optimizer must be adam or sgd, got {self.name!r}")
        if not (self.lr >= 0 and math.isfinite(self.lr)):
            out.append(f"{label}: lr must be a finite non-negative number, got {self.lr}")
        if self.weight_decay < 0:
            out.append(f"{label}: weight_decay must be non-negative")
        if not 0 <= self.momentum < 1:
            out.append(f"{label}: momentum must lie in [0, 1)")
        return out

    def build(self, params) -> Optimizer:
        if self.name == "adam":
            return Adam(params, lr=self.lr, weight_decay=self.weight_decay)
        return SGD(params, lr=self.lr, momentum=self.momentum, weight_decay=self.weight_decay)


@dataclass
class GktConfig:
    rounds: int = 200
    client_epochs: int = 1
    server_epochs: int = 20
    batch_size: int = 256
    client_optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    server_optimizer: OptimizerSpec = field(default_factory=OptimizerSpec)
    temperature: float = 1.0
    mode: str = "sync"
    num_clients: int = 16
    seed: int = 0
    kd_mode: str = "both"
    augment: bool = False
    eval_batch_size: int = 512
    # fraction of clients receiving downloads each round (sync only)
    participation: float = 1.0
    # plateau scheduling on test accuracy; patience 0 disables it
    lr_factor: float = 0.5
    lr_patience: int = 0
    min_lr: float = 1e-6
    train_factor: float = accounting.TRAIN_FACTOR
    barrier_timeout: float = 600.0

    def __post_init__(self):
        problems = self.problems()
        if problems:
            raise ConfigError(problems)

    def problems(self) -> list[str]:
        out = []
        for name in ("rounds", "client_epochs", "server_epochs", "batch_size", "num_clients", "eval_batch_size"):
            v = getattr(self, name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                out.append(f"{name} must be an integer >= 1, got {v!r}")
        if self.mode not in ("sync", "async"):
            out.append(f"mode must be sync or async, got {self.mode!r}")
        if self.kd_mode not in KD_MODES:
            out.append(f"kd_mode must be one of {', '.join(KD_MODES)}, got {self.kd_mode!r}")
        if not self.temperature > 0:
            out.append(f"temperature must be positive, got {self.temperature}")
        if not 0 < self.participation <= 1:
            out.append(f"participation must lie in (0, 1], got {self.participation}")
        elif self.participation < 1 and self.mode == "async":
            out.append("partial participation is only supported in sync mode")
        if not 0 < self.lr_factor <= 1:
            out.append(f"lr_factor must lie in (0, 1], got {self.lr_factor}")
        if self.lr_patience < 0:
            out.append("lr_patience must be non-negative")
        if self.seed < 0:
            out.append("seed must be non-negative")
        if not self.barrier_timeout > 0:
            out.append("barrier_timeout must be positive")
        out += self.client_optimizer.problems("client_optimizer")
        out += self.server_optimizer.problems("server_optimizer")
        return out

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "GktConfig":
        d = dict(d)
        for key in ("client_optimizer", "server_optimizer"):
            if isinstance(d.get(key), dict):
                d[key] = OptimizerSpec(**d[key])
        return cls(**d)


# Calibrated for the 4-class 8x8 synthetic task (see synthetic_pair).
TOY_NOISE = 1.0


def toy_config(**overrides) -> GktConfig:
    """Desk-scale hyperparameters for the synthetic task; keywords override them."""
    opt = OptimizerSpec("adam", 3e-3, weight_decay=1e-4)
    base = dict(rounds=15, client_epochs=1, server_epochs=2, batch_size=32, num_clients=4, temperature=5.0,
                client_optimizer=opt, server_optimizer=opt)
    base.update(overrides)
    return GktConfig(**base)


# -- learning-rate schedule ----------------------------------------------------

def plateau_lr_scheduler(history: Sequence[float], lr: float, factor: float = 0.5, patience: int = 5,
                         floor: float = 0.0) -> float:
    """Multiply ``lr`` by ``factor`` when the last ``patience`` scores fail to beat the best before them."""
    if patience < 1 or len(history) <= patience:
        return lr
    if max(history[-patience:]) > max(history[:-patience]):
        return lr
    return max(lr * factor, floor)


class PlateauScheduler:
    """Stateful wrapper: after each reduction the plateau window restarts."""

    def __init__(self, optimizer: Optimizer, factor: float = 0.5, patience: int = 5, floor: float = 0.0):
        self.optimizer = optimizer
        self.factor = factor
        self.patience = patience
        self.floor = floor
        self.history: list[float] = []

    def step(self, score: float) -> float:
        self.history.append(float(score))
        lr = self.optimizer.lr
        new = plateau_lr_scheduler(self.history, lr, self.factor, self.patience, self.floor)
        if new != lr:
            self.optimizer.lr = new
            self.history = [max(self.history)]
        return new


# -- metrics --------------------------------------------------------------------

@dataclass
class RoundMetrics:
    round: int
    test_acc: float
    server_loss: float
    mean_client_ce: float
    mean_client_kd: float
    bytes_up: int
    bytes_down: int
    flops_edge: int
    flops_server: int
    wall_ms: float
    client_acc: list = field(default_factory=list)
    client_ce: list = field(default_factory=list)
    client_kd: list = field(default_factory=list)
    payload_up: int = 0
    payload_down: int = 0
    server_lr: float = 0.0

    def csv_row(self) -> dict:
        return {c: getattr(self, c) for c in CSV_COLUMNS}


def metrics_equal(a: Sequence[RoundMetrics], b: Sequence[RoundMetrics], ignore=("wall_ms",)) -> bool:
    if len(a) != len(b):
        return False
    names = [f.name for f in fields(RoundMetrics) if f.name not in ignore]
    return all(getattr(x, n) == getattr(y, n) for x, y in zip(a, b) for n in names)


def write_metrics_csv(rows: Sequence[RoundMetrics], path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        w.writeheader()
        for row in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.csv_row().items()})


def read_metrics_csv(path) -> list[dict]:
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != CSV_COLUMNS:
            raise ValueError(f"{path}: unexpected columns {reader.fieldnames}")
        out = []
        for r in reader:
            out.append({k: (int(v) if k in ("round", "bytes_up", "bytes_down", "flops_edge", "flops_server")
                            else float(v)) for k, v in r.items()})
        return out


def write_manifest(path, manifest: dict) -> None:
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(f"cannot serialize {type(o).__name__}")


# -- shared helpers -------------------------------------------------------------

def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise DivergenceError(f"{what} is {value}")
    return value


def _epoch_cursor(indices, batch_size: int, seed: int, stream: int, round_: int, epoch: int) -> BatchCursor:
    if epoch == 0:
        return round_batches(indices, batch_size, seed, round_, stream)
    order = np.array(indices, dtype=np.int64, copy=True)
    np.random.default_rng([seed, stream, round_, epoch]).shuffle(order)
    return BatchCursor(order, batch_size)


def _train_inputs(data: Dataset, ix: np.ndarray, use_augment: bool, rng: np.random.Generator) -> np.ndarray:
    if use_augment:
        return augment(data.images[ix], rng, "train", data.mean, data.std)
    return data.normalized(ix)


def predict_logits(model, x: np.ndarray, batch_size: int = 512) -> np.ndarray:
    model.eval()
    out = [model(Tensor(x[i:i + batch_size])).data for i in range(0, len(x), batch_size)]
    return np.concatenate(out) if out else np.zeros((0, 0), np.float32)


def accuracy(model, data: Dataset, batch_size: int = 512) -> float:
    if len(data) == 0:
        return float("nan")
    return float((predict_logits(model, data.normalized(), batch_size).argmax(1) == data.labels).mean())


def evaluate_deployed(edge: EdgeModel, server: ServerModel, data: Dataset, batch_size: int = 512) -> float:
    return accuracy(assemble_deployed_model(edge, server), data, batch_size)


# -- client side -----------------------------------------------------------------

class ClientSession:
    """One edge device: local data, edge model, optimizer and cached server logits."""

    def __init__(self, client_id: int, edge: EdgeModel, train: Dataset, indices, test: Optional[Dataset],
                 config: GktConfig, delay: Optional[Callable[[int], float]] = None):
        self.client_id = int(client_id)
        self.edge = edge
        self.data = train
        self.indices = np.sort(np.asarray(indices, dtype=np.int64))
        self.test = test
        self.config = config
        self.kd = ablation_kd_mode(config.kd_mode)
        self.optimizer = config.client_optimizer.build(edge.parameters())
        self.delay = delay
        self.teacher: Optional[np.ndarray] = None
        self._cursor: Optional[BatchCursor] = None
        self._cursor_round = 0

    @property
    def num_samples(self) -> int:
        return len(self.indices)

    def local_training(self, round_: int) -> tuple[ClientUpload, float, float]:
        """Train for the configured epochs, then extract the upload in eval mode.

        Returns the upload and the mean CE and KD losses over the local steps.
        """
        if round_ < 1:
            raise ValueError(f"rounds start at 1, got {round_}")
        cfg = self.config
        cursor = round_batches(self.indices, cfg.batch_size, cfg.seed, round_, stream=self.client_id)
        use_kd = self.kd.client and self.teacher is not None
        rng = np.random.default_rng([cfg.seed, 3, self.client_id, round_])
        ce_sum = kd_sum = 0.0
        steps = 0
        self.edge.train()
        for epoch in range(cfg.client_epochs):
            cur = cursor if epoch == 0 else _epoch_cursor(self.indices, cfg.batch_size, cfg.seed, self.client_id,
                                                          round_, epoch)
            for _, ix in cur:
                x = _train_inputs(self.data, ix, cfg.augment, rng)
                teacher = self.teacher[np.searchsorted(self.indices, ix)] if use_kd else None
                with Tape() as tape:
                    logits = self.edge(Tensor(x))
                    terms = client_loss(logits, teacher, self.data.labels[ix], cfg.temperature, use_kd)
                self.optimizer.zero_grad()
                tape.backward(terms.total)
                self.optimizer.step()
                ce_sum += _finite(terms.ce.item(), f"client {self.client_id} CE loss")
                kd_sum += _finite(terms.kd.item(), f"client {self.client_id} KD loss") if terms.kd is not None else 0.0
                steps += 1
        self._cursor = cursor
        self._cursor_round = round_
        upload = self.extract(round_, cursor)
        n = max(steps, 1)
        return upload, ce_sum / n, kd_sum / n

    def extract(self, round_: int, cursor: BatchCursor) -> ClientUpload:
        self.edge.eval()
        batches = []
        for b_idx, ix in cursor:
            h = self.edge.extractor(Tensor(self.data.normalized(ix)))
            z = self.edge.classifier(h)
            batches.append(UploadBatch(b_idx, h.data, z.data, self.data.labels[ix].astype(np.uint32)))
        return ClientUpload(self.client_id, round_, batches)

    def apply_download(self, download: ServerDownload) -> None:
        """Map server logits back to samples through the cursor of the uploaded round."""
        if download.client_id != self.client_id:
            raise ProtocolDesyncError(f"client {self.client_id} received logits for client {download.client_id}")
        if self._cursor is None or download.round != self._cursor_round:
            raise ProtocolDesyncError(
                f"client {self.client_id}: download for round {download.round}, last upload was round "
                f"{self._cursor_round}")
        cursor = self._cursor
        got = [b.b_idx for b in download.batches]
        if got != list(range(len(cursor))):
            raise ProtocolDesyncError(f"client {self.client_id}: download covers batches {got}, expected "
                                      f"0..{len(cursor) - 1}")
        num_classes = self.edge.spec.num_classes
        teacher = np.zeros((self.num_samples, num_classes), dtype=np.float32)
        for b in download.batches:
            ix = cursor.batch(b.b_idx)
            if b.logits.shape != (len(ix), num_classes):
                raise ProtocolDesyncError(f"client {self.client_id}: batch {b.b_idx} logits have shape "
                                          f"{b.logits.shape}, expected {(len(ix), num_classes)}")
            teacher[np.searchsorted(self.indices, ix)] = b.logits
        self.teacher = teacher

    def eval_report(self, round_: int, ce: float, kd: float) -> EvalReport:
        feats = []
        labels = np.zeros(0, np.uint32)
        if self.test is not None and len(self.test):
            self.edge.eval()
            x = self.test.normalized()
            bs = self.config.eval_batch_size
            feats = [self.edge.extractor(Tensor(x[i:i + bs])).data for i in range(0, len(x), bs)]
            labels = self.test.labels.astype(np.uint32)
        return EvalReport(self.client_id, round_, float(ce), float(kd), self.num_samples, feats, labels)


def run_client(session: ClientSession, conn: Connection, rounds: int, mode: str = "sync",
               model_hash: Optional[bytes] = None) -> None:
    """Client message loop; returns after the coordinator says goodbye."""

    def do_round(r: int) -> None:
        if session.delay is not None:
            time.sleep(session.delay(r))
        upload, ce, kd = session.local_training(r)
        conn.send(session.eval_report(r, ce, kd))
        conn.send(upload)

    try:
        conn.send(Hello(session.client_id, model_hash or spec_hash(session.edge)))
        while True:
            msg = conn.recv(timeout=session.config.barrier_timeout)
            if isinstance(msg, RoundBegin):
                do_round(msg.round)
            elif isinstance(msg, ServerDownload):
                session.apply_download(msg)
                if mode == "async" and msg.round < rounds:
                    do_round(msg.round + 1)
            elif isinstance(msg, Bye):
                return
            elif isinstance(msg, ErrorMessage):
                raise ProtocolError(f"coordinator reported error {msg.code}: {msg.text}")
            else:
                raise ProtocolDesyncError(f"client received unexpected {type(msg).__name__}")
    except Exception as exc:
        code = exc.code if isinstance(exc, ProtocolError) else CLIENT_FAILURE
        try:
            conn.send(ErrorMessage(int(code), f"{type(exc).__name__}: {exc}"))
        except ProtocolError:
            pass
        raise
    finally:
        conn.close()


# -- server side ----------------------------------------------------------------------

class GktServer:
    """Server model, its optimizer and the per-client cache of uploads and logits."""

    def __init__(self, model: ServerModel, config: GktConfig):
        self.model = model
        self.config = config
        self.kd = ablation_kd_mode(config.kd_mode)
        self.optimizer = config.server_optimizer.build(model.parameters())
        self.scheduler = (PlateauScheduler(self.optimizer, config.lr_factor, config.lr_patience, config.min_lr)
                          if config.lr_patience > 0 else None)
        self.cache: dict[int, ClientUpload] = {}
        self.logits: dict[int, dict[int, np.ndarray]] = {}

    def server_round(self, uploads: Sequence[ClientUpload], expected: Optional[Sequence[int]] = None
                     ) -> tuple[dict[int, ServerDownload], float]:
        """Absorb ``uploads`` into the cache, sweep it, and build downloads for the uploaders.

        ``expected`` lists the clients that must all be present (sync barrier).
        """
        ids = [u.client_id for u in uploads]
        if len(set(ids)) != len(ids):
            raise ProtocolDesyncError(f"duplicate uploads from clients {ids}")
        if expected is not None:
            missing = sorted(set(expected) - set(ids))
            if missing:
                raise BarrierTimeoutError(f"sync barrier incomplete: no upload from clients {missing}")
        for up in uploads:
            self.cache[up.client_id] = up
        loss = self.sweep()
        downloads = {}
        for up in sorted(uploads, key=lambda u: u.client_id):
            z = self.logits[up.client_id]
            downloads[up.client_id] = ServerDownload(
                up.client_id, up.round, [DownloadBatch(b.b_idx, z[b.b_idx]) for b in up.batches])
        return downloads, loss

    def sweep(self) -> float:
        """E_s epochs over every cached batch, clients in ascending id.

        Logits recorded for download are the training-mode outputs of the last
        epoch, i.e. the forward pass each final update step is computed from.
        Returns the mean server loss over the last epoch.
        """
        cfg = self.config
        self.model.train()
        record: dict[int, dict[int, np.ndarray]] = {cid: {} for cid in self.cache}
        losses = []
        for epoch in range(cfg.server_epochs):
            last = epoch == cfg.server_epochs - 1
            for cid in sorted(self.cache):
                for b in self.cache[cid].batches:
                    with Tape() as tape:
                        out = self.model(Tensor(b.features))
                        terms = server_loss(out, b.logits, b.labels, cfg.temperature, self.kd.server)
                    self.optimizer.zero_grad()
                    tape.backward(terms.total)
                    self.optimizer.step()
                    if last:
                        record[cid][b.b_idx] = out.data.copy()
                        losses.append(_finite(terms.total.item(), "server loss"))
        self.logits = record
        return float(np.mean(losses)) if losses else 0.0

    def evaluate(self, report: EvalReport) -> float:
        if not len(report.labels):
            return float("nan")
        self.model.eval()
        preds = np.concatenate([self.model(Tensor(f)).data.argmax(1) for f in report.features])
        return float((preds == report.labels).mean())

    @property
    def cached_samples(self) -> int:
        return sum(u.num_samples for u in self.cache.values())


# -- coordinator ------------------------------------------------------------------

class Coordinator:
    """Drives the rounds over a set of client connections."""

    def __init__(self, server: GktServer, connections: dict[int, Connection], config: GktConfig,
                 edge_flops: int, server_flops: int, model_hash: Optional[bytes] = None,
                 on_round: Optional[Callable[[RoundMetrics], None]] = None):
        self.server = server
        self.conns = dict(sorted(connections.items()))
        self.config = config
        self.edge_flops = int(edge_flops)
        self.server_flops = int(server_flops)
        self.model_hash = model_hash
        self.on_round = on_round
        self.inbox: queue.Queue = queue.Queue()
        self.rows: list[RoundMetrics] = []
        self._flops_edge = 0
        self._flops_server = 0
        self._readers: list[threading.Thread] = []

    # messaging
    def _reader(self, cid: int, conn: Connection) -> None:
        while True:
            try:
                msg = conn.recv(timeout=None)
            except Exception as exc:  # delivered to the coordinator loop
                self.inbox.put((cid, exc))
                return
            self.inbox.put((cid, msg))

    def _start_readers(self) -> None:
        for cid, conn in self.conns.items():
            t = threading.Thread(target=self._reader, args=(cid, conn), daemon=True, name=f"gkt-reader-{cid}")
            t.start()
            self._readers.append(t)

    def _next(self, block: bool = True):
        try:
            cid, msg = self.inbox.get(block=block, timeout=self.config.barrier_timeout if block else None)
        except queue.Empty:
            if block:
                raise BarrierTimeoutError(f"no client message within {self.config.barrier_timeout}s") from None
            return None
        if isinstance(msg, Exception):
            raise msg
        if isinstance(msg, ErrorMessage):
            raise ProtocolError(f"client {cid} failed (code {msg.code}): {msg.text}")
        if not isinstance(msg, (ClientUpload, EvalReport)):
            raise ProtocolDesyncError(f"unexpected {type(msg).__name__} from client {cid}")
        if msg.client_id != cid:
            raise ProtocolDesyncError(f"connection of client {cid} sent a message for client {msg.client_id}")
        return cid, msg

    def _participants(self, round_: int) -> list[int]:
        ids = list(self.conns)
        p = self.config.participation
        if p >= 1:
            return ids
        m = max(1, math.ceil(p * len(ids)))
        rng = np.random.default_rng([self.config.seed, 4, round_])
        return sorted(int(i) for i in rng.choice(ids, size=m, replace=False))

    def _broadcast(self, message) -> None:
        for conn in self.conns.values():
            conn.send(message)

    # bookkeeping
    def _edge_cost(self, upload: ClientUpload) -> int:
        n = upload.num_samples
        cfg = self.config
        return int(round(cfg.train_factor * self.edge_flops * n * cfg.client_epochs)) + self.edge_flops * n

    def _sweep_cost(self) -> int:
        cfg = self.config
        return int(round(cfg.train_factor * self.server_flops * self.server.cached_samples * cfg.server_epochs))

    def _emit(self, round_: int, reports: dict[int, EvalReport], server_loss_: float, up: int, down: int,
              pay_up: int, pay_down: int, started: float) -> RoundMetrics:
        ids = sorted(reports)
        accs = [self.server.evaluate(reports[c]) for c in ids]
        scored = [a for a in accs if not math.isnan(a)]
        ce = [reports[c].train_ce for c in ids]
        kd = [reports[c].train_kd for c in ids]
        row = RoundMetrics(
            round=round_,
            test_acc=float(np.mean(scored)) if scored else float("nan"),
            server_loss=server_loss_,
            mean_client_ce=float(np.mean(ce)),
            mean_client_kd=float(np.mean(kd)),
            bytes_up=up,
            bytes_down=down,
            flops_edge=self._flops_edge,
            flops_server=self._flops_server,
            wall_ms=(time.perf_counter() - started) * 1000.0,
            client_acc=accs,
            client_ce=ce,
            client_kd=kd,
            payload_up=pay_up,
            payload_down=pay_down,
            server_lr=self.server.optimizer.lr,
        )
        if self.server.scheduler is not None and scored:
            self.server.scheduler.step(row.test_acc)
        self.rows.append(row)
        log.info("round %d acc=%.4f server_loss=%.4f ce=%.4f kd=%.4f", round_, row.test_acc, row.server_loss,
                 row.mean_client_ce, row.mean_client_kd)
        if self.on_round is not None:
            self.on_round(row)
        return row

    # main loops
    def handshake(self) -> None:
        for cid, conn in self.conns.items():
            msg = conn.recv(timeout=self.config.barrier_timeout)
            if not isinstance(msg, Hello):
                raise HandshakeError(f"expected hello from client {cid}, got {type(msg).__name__}")
            if msg.client_id != cid:
                raise HandshakeError(f"connection {cid} introduced itself as client {msg.client_id}")
            if self.model_hash is not None and msg.model_hash != self.model_hash:
                raise HandshakeError(f"client {cid} runs a different edge architecture")

    def run(self) -> list[RoundMetrics]:
        self.handshake()
        self._start_readers()
        try:
            if self.config.mode == "sync":
                self._run_sync()
            else:
                self._run_async()
            self._broadcast(Bye())
        except Exception as exc:
            code = exc.code if isinstance(exc, ProtocolError) else CLIENT_FAILURE
            for conn in self.conns.values():
                try:
                    conn.send(ErrorMessage(int(code), f"coordinator stopped: {exc}"))
                except ProtocolError:
                    pass
            raise
        return self.rows

    def _run_sync(self) -> None:
        cfg = self.config
        ids = list(self.conns)
        for r in range(1, cfg.rounds + 1):
            started = time.perf_counter()
            self._broadcast(RoundBegin(r, cfg.seed))
            uploads: dict[int, ClientUpload] = {}
            reports: dict[int, EvalReport] = {}
            while len(uploads) < len(ids):
                cid, msg = self._next()
                if msg.round != r:
                    raise ProtocolDesyncError(f"client {cid} sent round {msg.round} during round {r}")
                if isinstance(msg, EvalReport):
                    reports[cid] = msg
                else:
                    if cid not in reports:
                        raise ProtocolDesyncError(f"client {cid} uploaded before reporting")
                    uploads[cid] = msg
            ordered = [uploads[c] for c in ids]
            downloads, loss = self.server.server_round(ordered, expected=ids)
            self._flops_edge += sum(self._edge_cost(u) for u in ordered)
            self._flops_server += self._sweep_cost()
            down = pay_down = 0
            for cid in self._participants(r):
                down += self.conns[cid].send(downloads[cid])
                pay_down += payload_bytes(downloads[cid])
            self._emit(r, reports, loss, sum(measure_bytes(u) for u in ordered), down,
                       sum(payload_bytes(u) for u in ordered), pay_down, started)

    def _run_async(self) -> None:
        cfg = self.config
        consumed = {cid: 0 for cid in self.conns}
        reports: dict[int, dict[int, EvalReport]] = {}
        up = {r: 0 for r in range(1, cfg.rounds + 1)}
        down = dict(up)
        pay_up = dict(up)
        pay_down = dict(up)
        loss = float("nan")
        next_row = 1
        started = time.perf_counter()
        self._broadcast(RoundBegin(1, cfg.seed))
        while next_row <= cfg.rounds:
            arrived = [self._next()]
            while (item := self._next(block=False)) is not None:
                arrived.append(item)
            pending: dict[int, ClientUpload] = {}
            for cid, msg in arrived:
                if isinstance(msg, EvalReport):
                    reports.setdefault(msg.round, {})[cid] = msg
                    continue
                want = consumed[cid] + 1
                if msg.round != want or cid in pending:
                    raise ProtocolDesyncError(f"client {cid} uploaded round {msg.round}, expected {want}")
                if cid not in reports.get(msg.round, {}):
                    raise ProtocolDesyncError(f"client {cid} uploaded before reporting")
                pending[cid] = msg
            if not pending:
                continue
            batch = [pending[c] for c in sorted(pending)]
            downloads, loss = self.server.server_round(batch)
            self._flops_edge += sum(self._edge_cost(u) for u in batch)
            self._flops_server += self._sweep_cost()
            for u in batch:
                r = u.round
                up[r] += measure_bytes(u)
                pay_up[r] += payload_bytes(u)
                down[r] += self.conns[u.client_id].send(downloads[u.client_id])
                pay_down[r] += payload_bytes(downloads[u.client_id])
                consumed[u.client_id] = r
            while next_row <= cfg.rounds and min(consumed.values()) >= next_row:
                self._emit(next_row, reports.pop(next_row), loss, up[next_row], down[next_row], pay_up[next_row],
                           pay_down[next_row], started)
                started = time.perf_counter()
                next_row += 1


# -- full GKT runs -----------------------------------------------------------------

@dataclass
class GktResult:
    metrics: list
    edges: list
    server: ServerModel
    config: GktConfig
    partition: PartitionPlan

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].test_acc if self.metrics else float("nan")

    def deployed(self, k: int):
        return assemble_deployed_model(self.edges[k], self.server)


def build_gkt_models(config: GktConfig, edge_spec: ModelSpec, server_spec_: ModelSpec):
    edges = [EdgeModel(edge_spec, seed=derive_seed(config.seed, 1)) for k in range(config.num_clients)]
    server = ServerModel(server_spec_, seed=derive_seed(config.seed, 2))
    return edges, server


def _check_partition(config: GktConfig, partition: PartitionPlan) -> None:
    if partition.num_clients != config.num_clients:
        raise ConfigError([f"partition has {partition.num_clients} clients, config expects {config.num_clients}"])


def run_gkt(config: GktConfig, train: Dataset, test: Optional[Dataset], partition: PartitionPlan,
            edge_spec: ModelSpec, server_spec_: ModelSpec, transport: str = "inproc",
            delays: Optional[Sequence[Callable[[int], float]]] = None,
            on_round: Optional[Callable[[RoundMetrics], None]] = None) -> GktResult:
    """Simulate a full GKT run in one process, one thread per client.

    ``transport`` is ``inproc`` (queues) or ``tcp`` (loopback sockets).
    ``delays[k](round)`` optionally returns seconds client ``k`` sleeps before
    each round, for fault-injection tests.
    """
    _check_partition(config, partition)
    if transport not in ("inproc", "tcp"):
        raise ConfigError([f"transport must be inproc or tcp, got {transport!r}"])
    edges, server_model = build_gkt_models(config, edge_spec, server_spec_)
    sessions = [ClientSession(k, edges[k], train, partition.indices[k], test, config,
                              delay=delays[k] if delays is not None else None)
                for k in range(config.num_clients)]
    model_hash = spec_hash(edges[0])
    errors: dict[int, BaseException] = {}

    def client_main(session: ClientSession, conn_factory) -> None:
        try:
            conn = conn_factory()
            run_client(session, conn, config.rounds, config.mode, model_hash)
        except BaseException as exc:  # surfaced after the coordinator stops
            errors[session.client_id] = exc

    threads = []
    coord_conns: dict[int, Connection] = {}
    listener = None
    if transport == "inproc":
        for s in sessions:
            a, b = inprocess_pair()
            coord_conns[s.client_id] = a
            threads.append(threading.Thread(target=client_main, args=(s, lambda b=b: b), daemon=True))
    else:
        listener = TcpListener("127.0.0.1", 0)
        port = listener.port
        for s in sessions:
            threads.append(threading.Thread(target=client_main, args=(s, lambda: tcp_connect("127.0.0.1", port)),
                                            daemon=True))
    for t in threads:
        t.start()
    try:
        if listener is not None:
            coord_conns = accept_clients(listener, config.num_clients, config.barrier_timeout)
        coordinator = Coordinator(
            GktServer(server_model, config), coord_conns, config,
            edge_flops=accounting.count_flops(edges[0]), server_flops=accounting.count_flops(server_model),
            model_hash=model_hash, on_round=on_round,
        )
        try:
            rows = coordinator.run()
        except BaseException:
            for t in threads:
                t.join(timeout=5.0)
            for exc in errors.values():
                if isinstance(exc, DivergenceError):
                    raise exc
            raise
        for t in threads:
            t.join(timeout=config.barrier_timeout)
        if errors:
            raise next(iter(errors.values()))
    finally:
        for c in coord_conns.values():
            c.close()
        if listener is not None:
            listener.close()
    return GktResult(rows, edges, server_model, config, partition)


class _Pending(Connection):
    """Wraps an accepted socket whose hello was read before the id was known."""

    def __init__(self, conn: Connection, hello: Hello):
        super().__init__(conn.max_message_bytes, conn.timeout)
        self.inner = conn
        self.hello = hello

    def recv(self, timeout=None):
        if self.hello is not None:
            msg, self.hello = self.hello, None
            return msg
        return self.inner.recv(timeout)

    def send(self, message) -> int:
        return self.inner.send(message)

    def close(self) -> None:
        self.inner.close()


def accept_clients(listener: TcpListener, num_clients: int, timeout: float) -> dict[int, Connection]:
    """Accept ``num_clients`` connections and key them by the id in their hello."""
    conns: dict[int, Connection] = {}
    while len(conns) < num_clients:
        conn = listener.accept(timeout=timeout)
        hello = conn.recv(timeout=timeout)
        if not isinstance(hello, Hello):
            conn.close()
            raise HandshakeError(f"expected hello, got {type(hello).__name__}")
        if not 0 <= hello.client_id < num_clients or hello.client_id in conns:
            conn.close()
            raise HandshakeError(f"unexpected or duplicate client id {hello.client_id}")
        conns[hello.client_id] = _Pending(conn, hello)
    return conns


def serve(config: GktConfig, listener: TcpListener, server_model: ServerModel, edge_spec: ModelSpec,
          on_round: Optional[Callable[[RoundMetrics], None]] = None) -> list[RoundMetrics]:
    """Coordinator for clients running in other processes."""
    conns = accept_clients(listener, config.num_clients, config.barrier_timeout)
    edge = EdgeModel(edge_spec, seed=0)
    try:
        coordinator = Coordinator(GktServer(server_model, config), conns, config,
                                  edge_flops=accounting.count_flops(edge),
                                  server_flops=accounting.count_flops(server_model),
                                  model_hash=spec_hash(edge), on_round=on_round)
        return coordinator.run()
    finally:
        for c in conns.values():
            c.close()


# -- baselines ----------------------------------------------------------------------

@dataclass
class BaselineResult:
    metrics: list
    model: FullModel

    @property
    def final_accuracy(self) -> float:
        return self.metrics[-1].test_acc if self.metrics else float("nan")


def _train_epoch(model, optimizer: Optimizer, data: Dataset, cursor: BatchCursor, use_augment: bool,
                 rng: np.random.Generator) -> tuple[float, int]:
    model.train()
    total, steps = 0.0, 0
    for _, ix in cursor:
        x = _train_inputs(data, ix, use_augment, rng)
        with Tape() as tape:
            loss = cross_entropy(model(Tensor(x)), data.labels[ix])
        optimizer.zero_grad()
        tape.backward(loss)
        optimizer.step()
        total += _finite(loss.item(), "training loss")
        steps += 1
    return total, steps


def aggregate_states(states: Sequence[dict], weights: Sequence[float]) -> dict:
    """Weighted parameter average ``sum_k (w_k / sum w) * W_k``, accumulated in float64."""
    if not states:
        raise ValueError("nothing to aggregate")
    w = np.asarray(weights, dtype=np.float64)
    if w.shape != (len(states),) or (w < 0).any() or not w.sum() > 0:
        raise ValueError(f"need one non-negative weight per state with positive sum, got {weights}")
    w = w / w.sum()
    out = {}
    for name in states[0]:
        acc = np.zeros(states[0][name].shape, dtype=np.float64)
        for wk, s in zip(w, states):
            if s[name].shape != acc.shape:
                raise ValueError(f"{name}: shape {s[name].shape} differs from {acc.shape}")
            acc += wk * s[name]
        out[name] = acc.astype(np.float32)
    return out


def baseline_model(config: GktConfig, edge_spec: ModelSpec, server_spec_: ModelSpec) -> FullModel:
    return build_full_model(edge_spec, server_spec_, seed=derive_seed(config.seed, 5))


def run_fedavg(config: GktConfig, train: Dataset, test: Optional[Dataset], partition: PartitionPlan,
               edge_spec: ModelSpec, server_spec_: ModelSpec,
               on_round: Optional[Callable[[RoundMetrics], None]] = None) -> BaselineResult:
    """FedAvg over the non-split model; ``client_epochs`` local epochs per round.

    Each client keeps its optimizer state between rounds, so with one client
    this is exactly centralized training evaluated every ``client_epochs``.
    """
    _check_partition(config, partition)
    global_model = baseline_model(config, edge_spec, server_spec_)
    fwd = accounting.count_flops(global_model)
    nparams = accounting.count_params(global_model)
    nstate = sum(v.size for v in global_model.state_dict().values())
    locals_, optims = [], []
    for _ in range(config.num_clients):
        m = baseline_model(config, edge_spec, server_spec_)
        locals_.append(m)
        optims.append(config.client_optimizer.build(m.parameters()))
    rows = []
    flops = 0
    E = config.client_epochs
    for r in range(1, config.rounds + 1):
        started = time.perf_counter()
        gstate = global_model.state_dict()
        states, weights = [], []
        loss_sum, steps = 0.0, 0
        for k, ix in enumerate(partition.indices):
            if len(ix) == 0:
                continue
            model = locals_[k]
            model.load_state_dict(gstate)
            rng = np.random.default_rng([config.seed, 3, k, r])
            for e in range(E):
                cursor = round_batches(ix, config.batch_size, config.seed, (r - 1) * E + e + 1, stream=k)
                t, s = _train_epoch(model, optims[k], train, cursor, config.augment, rng)
                loss_sum += t
                steps += s
            states.append(model.state_dict())
            weights.append(len(ix))
            flops += int(round(config.train_factor * fwd * len(ix) * E))
        global_model.load_state_dict(aggregate_states(states, weights))
        acc = accuracy(global_model, test, config.eval_batch_size) if test is not None else float("nan")
        mean_loss = loss_sum / max(steps, 1)
        model_bytes = 4 * nstate * len(states)
        row = RoundMetrics(r, acc, float("nan"), mean_loss, 0.0, model_bytes, model_bytes, flops, 0,
                           (time.perf_counter() - started) * 1000.0, payload_up=4 * nparams * len(states),
                           payload_down=4 * nparams * len(states), server_lr=optims[0].lr)
        rows.append(row)
        if on_round is not None:
            on_round(row)
    return BaselineResult(rows, global_model)


def run_centralized(config: GktConfig, train: Dataset, test: Optional[Dataset], edge_spec: ModelSpec,
                    server_spec_: ModelSpec, epochs: Optional[int] = None,
                    on_round: Optional[Callable[[RoundMetrics], None]] = None) -> BaselineResult:
    """Plain supervised training of the non-split model, evaluated after every epoch."""
    model = baseline_model(config, edge_spec, server_spec_)
    optimizer = config.client_optimizer.build(model.parameters())
    scheduler = (PlateauScheduler(optimizer, config.lr_factor, config.lr_patience, config.min_lr)
                 if config.lr_patience > 0 else None)
    fwd = accounting.count_flops(model)
    indices = np.arange(len(train))
    rows = []
    flops = 0
    for e in range(1, (epochs or config.rounds) + 1):
        started = time.perf_counter()
        rng = np.random.default_rng([config.seed, 3, 0, e])
        cursor = round_batches(indices, config.batch_size, config.seed, e, stream=0)
        total, steps = _train_epoch(model, optimizer, train, cursor, config.augment, rng)
        flops += int(round(config.train_factor * fwd * len(train)))
        acc = accuracy(model, test, config.eval_batch_size) if test is not None else float("nan")
        row = RoundMetrics(e, acc, float("nan"), total / max(steps, 1), 0.0, 0, 0, flops, 0,
                           (time.perf_counter() - started) * 1000.0, server_lr=optimizer.lr)
        if scheduler is not None:
            scheduler.step(acc)
        rows.append(row)
        if on_round is not None:
            on_round(row)
    return BaselineResult(rows, model)
