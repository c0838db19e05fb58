"""Federated training loop: sampling, local steps, protected upload, aggregation.

Clients and server exchange only serialized messages through a
:class:`Transport`.  The server side accepts nothing but
:class:`NoisyGradient` payloads, which are produced after the AdaLDP
mechanism has run on the client.  All randomness is derived from
``(seed, client id, round)`` so serial and threaded execution agree.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .adaldp import STOP, PrivacyState, TraceRow, adaldp_step, noise_generator
from .idst_cl import IDSTCL, ModelParams
from .instances import ClientData, sample_local_batch
from .nn_core import ConfigError

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = "fedcctr-checkpoint"
CHECKPOINT_VERSION = 1
OPTIMIZERS = ("sgd", "adamw")

# stream ids for per-(seed, client, round) generators
_STREAM_NOISE, _STREAM_BATCH, _STREAM_DROPOUT, _STREAM_SAMPLE = 0, 1, 2, 3


class TrainingTerminated(RuntimeError):
    """Raised by :func:`sample_clients` when no client is active."""


# ---------------------------------------------------------------------------
# Messages
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class NoisyGradient:
    """The only client-to-server payload: a clipped, perturbed gradient plus loss telemetry."""

    client_id: int
    round: int
    vector: np.ndarray
    losses: Tuple[float, ...] = ()      # bce_a, bce_b, idra, cdrd, total
    sigma: float = 0.0

    def to_bytes(self) -> bytes:
        head = json.dumps({"kind": "noisy_gradient", "client": self.client_id, "round": self.round,
                           "n": int(self.vector.size), "losses": list(self.losses), "sigma": self.sigma})
        return head.encode() + b"\n" + np.ascontiguousarray(self.vector, dtype="<f8").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> "NoisyGradient":
        head, _, body = blob.partition(b"\n")
        meta = json.loads(head)
        if meta.get("kind") != "noisy_gradient":
            raise TypeError(f"server only accepts noisy gradients, got {meta.get('kind')!r}")
        vec = np.frombuffer(body, dtype="<f8").astype(np.float64)
        if vec.size != meta["n"]:
            raise ValueError("truncated gradient payload")
        return cls(meta["client"], meta["round"], vec, tuple(meta["losses"]), meta["sigma"])


@dataclass(frozen=True)
class StopNotice:
    """Client-to-server message announcing budget exhaustion; carries no gradient."""

    client_id: int
    round: int

    def to_bytes(self) -> bytes:
        return json.dumps({"kind": "stop", "client": self.client_id, "round": self.round}).encode()


Upload = Union[NoisyGradient, StopNotice]


class Transport:
    """In-process message boundary: every message is serialized, logged and decoded on delivery."""

    def __init__(self, keep_log: bool = False) -> None:
        self.keep_log = keep_log
        self.uploads: List[bytes] = []
        self.broadcasts: List[bytes] = []
        self._lock = threading.Lock()

    def broadcast(self, round_: int, params: np.ndarray) -> np.ndarray:
        blob = json.dumps({"kind": "params", "round": round_}).encode() + b"\n" + params.astype("<f8").tobytes()
        if self.keep_log:
            self.broadcasts.append(blob)
        body = blob.split(b"\n", 1)[1]
        out = np.frombuffer(body, dtype="<f8").astype(np.float64)
        out.setflags(write=False)
        return out

    def upload(self, msg: Upload) -> Upload:
        if not isinstance(msg, (NoisyGradient, StopNotice)):
            raise TypeError(f"clients may only upload NoisyGradient or StopNotice, got {type(msg).__name__}")
        blob = msg.to_bytes()
        if self.keep_log:
            with self._lock:
                self.uploads.append(blob)
        meta = json.loads(blob.split(b"\n", 1)[0])
        if meta["kind"] == "stop":
            return StopNotice(meta["client"], meta["round"])
        return NoisyGradient.from_bytes(blob)

    def uploaded_vectors(self) -> List[np.ndarray]:
        out = []
        for blob in self.uploads:
            head, _, body = blob.partition(b"\n")
            if json.loads(head)["kind"] == "noisy_gradient":
                out.append(np.frombuffer(body, dtype="<f8"))
        return out


# ---------------------------------------------------------------------------
# State
# ---------------------------------------------------------------------------

@dataclass
class FedConfig:
    rounds: int = 50
    eta: float = 5e-4
    rho: float = 0.01
    batch_size: int = 32
    local_steps: int = 1
    optimizer: str = "sgd"
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    threads: int = 1

    def validate(self) -> None:
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if not self.eta > 0:
            raise ConfigError(f"eta must be > 0, got {self.eta}")
        if not 0.0 < self.rho <= 1.0:
            raise ConfigError(f"rho must be in (0, 1], got {self.rho}")
        if self.batch_size < 1 or self.local_steps < 1 or self.threads < 1:
            raise ConfigError("batch_size, local_steps and threads must be >= 1")
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")


@dataclass
class RoundReport:
    round: int
    sampled: Tuple[int, ...]
    received: int
    dropped: int
    mean_loss: float
    sigma_mean: float
    seconds: float
    skipped: bool = False
    mean_terms: Tuple[float, ...] = ()   # bce_a, bce_b, idra, cdrd (unweighted), total


@dataclass
class GlobalModel:
    params: np.ndarray
    round: int = 0
    history: List[RoundReport] = field(default_factory=list)

    def save(self, path: Path, config_hash: str = "") -> None:
        """Header line (JSON) followed by the raw little-endian float64 vector."""
        head = {"magic": CHECKPOINT_MAGIC, "version": CHECKPOINT_VERSION, "config_hash": config_hash,
                "round": self.round, "n_params": int(self.params.size)}
        with open(path, "wb") as fh:
            fh.write(json.dumps(head, sort_keys=True).encode() + b"\n")
            fh.write(np.ascontiguousarray(self.params, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path: Path) -> Tuple["GlobalModel", dict]:
        with open(path, "rb") as fh:
            head = json.loads(fh.readline())
            if head.get("magic") != CHECKPOINT_MAGIC:
                raise ValueError(f"{path} is not a checkpoint")
            if head.get("version") != CHECKPOINT_VERSION:
                raise ValueError(f"unsupported checkpoint version {head.get('version')}")
            vec = np.frombuffer(fh.read(), dtype="<f8").astype(np.float64)
        if vec.size != head["n_params"]:
            raise ValueError("checkpoint is truncated")
        return cls(vec, head["round"]), head


@dataclass
class ClientState:
    data: ClientData
    privacy: PrivacyState
    active: bool = True
    trace: List[TraceRow] = field(default_factory=list)

    def __post_init__(self) -> None:
        if self.privacy.stopped:
            self.active = False

    @property
    def client_id(self) -> int:
        return self.data.client_id


def config_hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def sample_size(rho: float, n_clients: int) -> int:
    return max(1, int(math.floor(rho * n_clients + 0.5)))


def sample_clients(clients: Sequence[ClientState], rho: float, rng: np.random.Generator,
                   n_total: Optional[int] = None) -> List[ClientState]:
    """Uniform sample without replacement among active clients, sorted by client id."""
    if not 0.0 < rho <= 1.0:
        raise ConfigError(f"rho must be in (0, 1], got {rho}")
    active = sorted((c for c in clients if c.active), key=lambda c: c.client_id)
    if not active:
        raise TrainingTerminated("no active clients")
    k = min(len(active), sample_size(rho, n_total if n_total is not None else len(clients)))
    idx = np.sort(rng.choice(len(active), size=k, replace=False))
    return [active[i] for i in idx]


def client_step(client: ClientState, model: IDSTCL, global_params: np.ndarray, round_: int,
                cfg: FedConfig, seed: int) -> Union[NoisyGradient, StopNotice, None]:
    """One round of local work; returns the message to upload (None if skipped)."""
    if not client.active:
        return None
    cid = client.client_id
    if not client.data.examples["A"] or not client.data.examples["B"]:
        log.warning("client %s has an empty local dataset; skipped", client.data.user)
        return None
    batch_rng = np.random.default_rng([seed, cid, round_, _STREAM_BATCH])
    drop_rng = np.random.default_rng([seed, cid, round_, _STREAM_DROPOUT])
    local = ModelParams(model.shapes, np.array(global_params, dtype=np.float64))
    terms = None
    for _ in range(cfg.local_steps):
        batch = sample_local_batch(client.data, batch_rng, cfg.batch_size, model.config.max_len)
        lb, g = model.loss_and_grad(local, batch, drop_rng)
        if terms is None:
            terms = (lb.bce_a, lb.bce_b, lb.idra, lb.cdrd, lb.total)
        if cfg.local_steps > 1:
            local.flat -= cfg.eta * g
    if cfg.local_steps > 1:
        # pseudo-gradient of the local trajectory; equals g when only one step is taken
        g = (np.asarray(global_params) - local.flat) / cfg.eta
    # the server clock sets the noise scale for this release
    priv = replace(client.privacy, round=round_, sigma_t=client.privacy.sigma_0 * client.privacy.decay ** round_)
    sigma = priv.sigma_t
    noisy, client.privacy = adaldp_step(g, priv, noise_generator(seed, cid, round_, _STREAM_NOISE), client.trace)
    if noisy is STOP:
        client.active = False
        return StopNotice(cid, round_)
    return NoisyGradient(cid, round_, noisy, terms, sigma)


class AdamW:
    """Decoupled weight decay Adam on the aggregated gradient."""

    def __init__(self, n: int, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01) -> None:
        self.lr, self.b1, self.b2, self.eps, self.wd = lr, beta1, beta2, eps, weight_decay
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, params: np.ndarray, g: np.ndarray) -> np.ndarray:
        self.t += 1
        self.m = self.b1 * self.m + (1 - self.b1) * g
        self.v = self.b2 * self.v + (1 - self.b2) * g * g
        mhat = self.m / (1 - self.b1 ** self.t)
        vhat = self.v / (1 - self.b2 ** self.t)
        return params - self.lr * (mhat / (np.sqrt(vhat) + self.eps) + self.wd * params)


def aggregate(gradients: Sequence[NoisyGradient]) -> np.ndarray:
    """Unweighted mean, summed in client-id order so arrival order does not matter."""
    for m in gradients:
        if not isinstance(m, NoisyGradient):
            raise TypeError(f"server only aggregates NoisyGradient payloads, got {type(m).__name__}")
    if not gradients:
        raise ValueError("no gradients to aggregate")
    ordered = sorted(gradients, key=lambda m: (m.client_id, m.round))
    total = np.zeros_like(ordered[0].vector)
    for m in ordered:
        total += m.vector
    return total / len(ordered)


def aggregate_and_update(global_model: GlobalModel, gradients: Sequence[NoisyGradient], eta: float,
                         optimizer: Optional[AdamW] = None) -> GlobalModel:
    """``params - eta * mean(gradients)`` (or an AdamW step); zero gradients leave the model as is."""
    if not gradients:
        return global_model
    g = aggregate(gradients)
    if g.shape != global_model.params.shape:
        raise ValueError(f"gradient length {g.size} != parameter length {global_model.params.size}")
    new = optimizer.step(global_model.params, g) if optimizer is not None else global_model.params - eta * g
    return GlobalModel(new, global_model.round + 1, global_model.history)


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------

@dataclass
class TrainingResult:
    model: GlobalModel
    reports: List[RoundReport]
    clients: List[ClientState]
    terminated: bool
    transport: Transport


def run_training(model: IDSTCL, clients: Sequence[ClientState], cfg: FedConfig,
                 init_params: Optional[np.ndarray] = None, transport: Optional[Transport] = None,
                 record_timing: bool = False,
                 on_round: Optional[Callable[[int, GlobalModel], None]] = None) -> TrainingResult:
    """Run up to ``cfg.rounds`` rounds; stops early once every client is inactive."""
    cfg.validate()
    for c in clients:
        c.privacy.validate()
    transport = transport or Transport()
    params = np.array(init_params if init_params is not None else model.init_params(cfg.seed).flat)
    n_params = params.size
    gm = GlobalModel(params, 0, [])
    opt = AdamW(n_params, cfg.eta, cfg.beta1, cfg.beta2, cfg.adam_eps, cfg.weight_decay) \
        if cfg.optimizer == "adamw" else None
    reports: List[RoundReport] = []
    terminated = False
    local = threading.local()

    def worker_model() -> IDSTCL:
        if cfg.threads == 1:
            return model
        if not hasattr(local, "model"):
            local.model = copy.deepcopy(model)
        return local.model

    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    try:
        for t in range(1, cfg.rounds + 1):
            t0 = time.perf_counter()
            try:
                sampled = sample_clients(clients, cfg.rho, np.random.default_rng([cfg.seed, t, _STREAM_SAMPLE]),
                                         len(clients))
            except TrainingTerminated:
                terminated = True
                break
            snapshot = transport.broadcast(t, gm.params)

            def work(c: ClientState):
                msg = client_step(c, worker_model(), snapshot, t, cfg, cfg.seed)
                return transport.upload(msg) if msg is not None else None

            msgs = list(pool.map(work, sampled)) if pool is not None else [work(c) for c in sampled]
            received = [m for m in msgs if isinstance(m, NoisyGradient)]
            dropped = sum(isinstance(m, StopNotice) for m in msgs)
            skipped_clients = sum(m is None for m in msgs)
            gm = aggregate_and_update(gm, received, cfg.eta, opt)
            if gm.params.size != n_params:
                raise AssertionError("parameter vector length changed")
            if received:
                terms = np.mean([m.losses for m in received], axis=0)
                mean_loss = float(terms[-1])
                sigma_mean = float(np.mean([m.sigma for m in received]))
            else:
                log.warning("round %d: no gradients received; update skipped", t)
                terms, mean_loss, sigma_mean = np.full(5, math.nan), math.nan, math.nan
            rep = RoundReport(t, tuple(c.client_id for c in sampled), len(received), dropped + skipped_clients,
                              mean_loss, sigma_mean, time.perf_counter() - t0 if record_timing else 0.0,
                              not received, tuple(float(x) for x in terms))
            reports.append(rep)
            gm.history.append(rep)
            if on_round is not None:
                on_round(t, gm)
        else:
            terminated = not any(c.active for c in clients)
    finally:
        if pool is not None:
            pool.shutdown()
    return TrainingResult(gm, reports, list(clients), terminated, transport)


def centralized_train(model: IDSTCL, client: ClientData, rounds: int, eta: float, batch_size: int = 32,
                      seed: int = 0, init_params: Optional[np.ndarray] = None) -> np.ndarray:
    """Plain SGD on one client's data with the same batch/dropout streams as the federated loop."""
    p = ModelParams(model.shapes, np.array(init_params if init_params is not None
                                           else model.init_params(seed).flat))
    cid = client.client_id
    for t in range(1, rounds + 1):
        batch = sample_local_batch(client, np.random.default_rng([seed, cid, t, _STREAM_BATCH]),
                                   batch_size, model.config.max_len)
        _, g = model.loss_and_grad(p, batch, np.random.default_rng([seed, cid, t, _STREAM_DROPOUT]))
        p = ModelParams(model.shapes, p.flat - eta * g)
    return p.flat


# ---------------------------------------------------------------------------
# Output files
# ---------------------------------------------------------------------------

def write_round_csv(path: Path, reports: Sequence[RoundReport]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "sampled", "received", "dropped", "mean_loss", "sigma_mean", "seconds"])
        for r in reports:
            w.writerow([r.round, len(r.sampled), r.received, r.dropped, repr(r.mean_loss), repr(r.sigma_mean),
                        f"{r.seconds:.6f}"])


def write_loss_terms_csv(path: Path, reports: Sequence[RoundReport], lambda1: float, lambda2: float) -> None:
    """Per-round mean loss components and their weighted contributions."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["round", "bce_a", "bce_b", "idra", "cdrd", "idra_term", "cdrd_term", "total"])
        for r in reports:
            a, b, i, c, tot = r.mean_terms
            w.writerow([r.round, repr(a), repr(b), repr(i), repr(c), repr(lambda1 * i), repr(lambda2 * c),
                        repr(tot)])
