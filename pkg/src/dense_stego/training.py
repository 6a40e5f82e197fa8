"""Joint training of the hiding encoder and reveal decoder, and checkpoint files."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional

import numpy as np

from .image_io import DatasetManifest, ImageCache, atomic_write_bytes, concat_pair, epoch_pairs, to_tensor
from .network import NetworkConfig, StegoNet, load_state_arrays, state_arrays
from .tensor_core import Tensor, backward, mse_mean

log = logging.getLogger(__name__)


class NonFiniteLossError(FloatingPointError):
    """Training diverged: a loss term is NaN or infinite."""


@dataclass
class HyperParams:
    learning_rate: float = 0.001
    beta: float = 0.75
    batch_size: int = 16
    epochs: int = 200
    seed: int = 0
    checkpoint_every: int = 0
    repair_each_epoch: bool = True

    def __post_init__(self):
        if self.beta < 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ValueError(f"epochs must be >= 0, got {self.epochs}")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be positive, got {self.learning_rate}")

    @classmethod
    def paper(cls, **overrides) -> "HyperParams":
        return cls(**{**dict(batch_size=16, epochs=200), **overrides})

    @classmethod
    def desk(cls, **overrides) -> "HyperParams":
        return cls(**{**dict(batch_size=4, epochs=100), **overrides})

    @classmethod
    def from_preset(cls, name: str, **overrides) -> "HyperParams":
        return cls.paper(**overrides) if name == "paper" else cls.desk(**overrides)


# -- losses --------------------------------------------------------------------


def loss_tau(carrier: Tensor, stego: Tensor) -> Tensor:
    """Carrier reconstruction error (mean squared)."""
    return mse_mean(carrier, stego)


def loss_gamma(secret: Tensor, recovered: Tensor) -> Tensor:
    """Secret reconstruction error (mean squared)."""
    return mse_mean(secret, recovered)


def loss_total(tau, gamma, beta: float):
    """tau + beta * gamma. Works on scalar tensors or plain floats."""
    for name, v in (("tau", tau), ("gamma", gamma)):
        value = v.item() if isinstance(v, Tensor) else float(v)
        if not math.isfinite(value):
            raise NonFiniteLossError(f"{name} is not finite ({value})")
    if not math.isfinite(beta):
        raise NonFiniteLossError(f"beta is not finite ({beta})")
    if isinstance(tau, Tensor):
        return tau + gamma * beta
    return float(tau) + beta * float(gamma)


# -- optimizer -----------------------------------------------------------------


class Adam:
    """Adam keyed by parameter name."""

    def __init__(self, named_params, lr: float = 0.001, betas=(0.9, 0.999), eps: float = 1e-8):
        items = list(named_params)
        self.params = dict(items)
        if len(self.params) != len(items):
            raise ValueError("parameter names must be unique")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        self.step_count += 1
        t = self.step_count
        bc1 = 1.0 - self.b1 ** t
        bc2 = 1.0 - self.b2 ** t
        for name, p in self.params.items():
            if p.grad is None:
                continue
            g = p.grad
            m, v = self.m[name], self.v[name]
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            denom = np.sqrt(v / bc2) + self.eps
            p.data -= (self.lr * (m / bc1) / denom).astype(p.data.dtype)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for n in self.params:
            out[f"optim.m.{n}"] = self.m[n]
        for n in self.params:
            out[f"optim.v.{n}"] = self.v[n]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], step_count: int) -> None:
        for n in self.params:
            self.m[n][...] = arrays[f"optim.m.{n}"]
            self.v[n][...] = arrays[f"optim.v.{n}"]
        self.step_count = step_count


# -- steps and loops -----------------------------------------------------------


@dataclass
class StepReport:
    zeta: float
    tau: float
    gamma: float


def forward_losses(net: StegoNet, carrier: Tensor, secret: Tensor, beta: float):
    stego = net.encoder(concat_pair(carrier, secret))
    recovered = net.decoder(stego)
    tau = loss_tau(carrier, stego)
    gamma = loss_gamma(secret, recovered)
    return loss_total(tau, gamma, beta), tau, gamma


def train_step(net: StegoNet, opt: Adam, carrier: Tensor, secret: Tensor, hp: HyperParams) -> StepReport:
    """One forward, one backward on zeta, one optimizer update."""
    net.train()
    opt.zero_grad()
    zeta, tau, gamma = forward_losses(net, carrier, secret, hp.beta)
    if not math.isfinite(zeta.item()):
        raise NonFiniteLossError(f"zeta is not finite ({zeta.item()})")
    backward(zeta)
    opt.step()
    return StepReport(zeta=zeta.item(), tau=tau.item(), gamma=gamma.item())


CHECKPOINT_MAGIC = b"DSTGCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointIntegrityError(CheckpointError):
    pass


class CheckpointConfigError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: NetworkConfig
    hparams: HyperParams
    arrays: dict = field(default_factory=dict)
    optimizer_step: int = 0
    epoch: int = 0
    version: int = CHECKPOINT_VERSION

    @classmethod
    def capture(cls, net: StegoNet, opt: Optional[Adam], hp: HyperParams, epoch: int) -> "Checkpoint":
        arrays = {k: np.array(v, dtype="<f4", copy=True) for k, v in state_arrays(net).items()}
        step = 0
        if opt is not None:
            arrays.update({k: np.array(v, dtype="<f4", copy=True) for k, v in opt.state_arrays().items()})
            step = opt.step_count
        return cls(config=net.config, hparams=hp, arrays=arrays, optimizer_step=step, epoch=epoch)

    def build_network(self) -> StegoNet:
        net = StegoNet(self.config, seed=self.hparams.seed)
        model_arrays = {k: v for k, v in self.arrays.items() if not k.startswith("optim.")}
        try:
            load_state_arrays(net, model_arrays)
        except ValueError as exc:
            raise CheckpointConfigError(f"checkpoint arrays do not fit its config: {exc}") from exc
        net.eval()
        return net

    def build_optimizer(self, net: StegoNet) -> Adam:
        opt = Adam(net.named_parameters(), lr=self.hparams.learning_rate)
        if self.optimizer_step or any(k.startswith("optim.") for k in self.arrays):
            opt.load_state(self.arrays, self.optimizer_step)
        return opt

    def to_bytes(self) -> bytes:
        directory = []
        chunks = []
        offset = 0
        for name, arr in self.arrays.items():
            raw = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
            chunks.append(raw)
            offset += len(raw)
        payload = b"".join(chunks)
        header = {
            "config": self.config.to_dict(),
            "hparams": asdict(self.hparams),
            "optimizer_step": self.optimizer_step,
            "epoch": self.epoch,
            "arrays": directory,
            "payload_nbytes": len(payload),
            "payload_sha256": hashlib.sha256(payload).hexdigest(),
        }
        hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
        return CHECKPOINT_MAGIC + struct.pack("<II", self.version, len(hbytes)) + hbytes + payload

    @classmethod
    def from_bytes(cls, blob: bytes, expected_config: Optional[NetworkConfig] = None) -> "Checkpoint":
        prefix = len(CHECKPOINT_MAGIC) + 8
        if len(blob) < prefix or not blob.startswith(CHECKPOINT_MAGIC):
            raise CheckpointIntegrityError("not a checkpoint file or truncated header")
        version, hlen = struct.unpack("<II", blob[len(CHECKPOINT_MAGIC):prefix])
        if version != CHECKPOINT_VERSION:
            raise CheckpointVersionError(f"checkpoint format version {version} is not supported "
                                         f"(this reader understands version {CHECKPOINT_VERSION})")
        if len(blob) < prefix + hlen:
            raise CheckpointIntegrityError("checkpoint truncated inside the header")
        try:
            header = json.loads(blob[prefix:prefix + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointIntegrityError(f"checkpoint header is corrupt ({exc})") from exc
        payload = blob[prefix + hlen:]
        if len(payload) != header.get("payload_nbytes"):
            raise CheckpointIntegrityError(f"checkpoint payload has {len(payload)} bytes, header "
                                           f"declares {header.get('payload_nbytes')} (truncated?)")
        if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
            raise CheckpointIntegrityError("checkpoint payload checksum mismatch")
        try:
            config = NetworkConfig(**header["config"])
            known = {f.name for f in fields(HyperParams)}
            hparams = HyperParams(**{k: v for k, v in header["hparams"].items() if k in known})
        except (TypeError, ValueError, KeyError) as exc:
            raise CheckpointConfigError(f"checkpoint config is invalid: {exc}") from exc
        if expected_config is not None and config != expected_config:
            raise CheckpointConfigError(f"checkpoint was written for {config}, expected {expected_config}")
        arrays = {}
        for entry in header["arrays"]:
            raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
            arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
        ckpt = cls(config=config, hparams=hparams, arrays=arrays, optimizer_step=header["optimizer_step"],
                   epoch=header["epoch"], version=version)
        expected = state_arrays(StegoNet(config))
        for name, arr in expected.items():
            if name not in arrays or arrays[name].shape != arr.shape:
                raise CheckpointConfigError(f"checkpoint array {name!r} missing or mis-shaped for its config")
        return ckpt


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    atomic_write_bytes(path, ckpt.to_bytes())
    return path


def load_checkpoint(path, expected_config: Optional[NetworkConfig] = None) -> Checkpoint:
    return Checkpoint.from_bytes(Path(path).read_bytes(), expected_config)


LOG_COLUMNS = ("epoch", "step", "zeta", "tau", "gamma")


def write_loss_csv(rows, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"], r["step"], repr(r["zeta"]), repr(r["tau"]), repr(r["gamma"])])
    return path


def epoch_means(rows) -> list[float]:
    by_epoch: dict[int, list[float]] = {}
    for r in rows:
        by_epoch.setdefault(r["epoch"], []).append(r["zeta"])
    return [float(np.mean(by_epoch[e])) for e in sorted(by_epoch)]


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    log: list
    net: StegoNet


def train_loop(manifest: DatasetManifest, config: NetworkConfig, hp: HyperParams,
               out_dir=None, on_epoch: Optional[Callable[[int, float], None]] = None) -> TrainResult:
    """Train on every usable pair of ``manifest`` for ``hp.epochs`` epochs.

    Writes ``loss.csv`` and ``checkpoint.dsc`` under ``out_dir`` when given;
    with ``hp.checkpoint_every > 0`` an ``epoch_XXXX.dsc`` is also written at
    that cadence.
    """
    if len(manifest) == 0:
        raise ValueError("manifest has no pairs")
    cache = ImageCache(manifest, config.image_size)
    net = StegoNet(config, seed=hp.seed)
    opt = Adam(net.named_parameters(), lr=hp.learning_rate)
    rows: list[dict] = []
    out_dir = Path(out_dir) if out_dir is not None else None
    step = 0
    for epoch in range(hp.epochs):
        rng = np.random.default_rng([hp.seed, epoch])
        pairs = list(manifest.pairs)
        if hp.repair_each_epoch:
            pairs = epoch_pairs(pairs, rng, manifest.allow_self)
        images = cache.usable(pairs)
        if not images:
            raise ValueError(f"epoch {epoch} has no readable image pairs")
        order = rng.permutation(len(images))
        for start in range(0, len(order), hp.batch_size):
            idx = order[start:start + hp.batch_size]
            carrier = to_tensor(*(images[i][0] for i in idx))
            secret = to_tensor(*(images[i][1] for i in idx))
            rep = train_step(net, opt, carrier, secret, hp)
            rows.append({"epoch": epoch, "step": step, "zeta": rep.zeta, "tau": rep.tau, "gamma": rep.gamma})
            step += 1
        mean_zeta = float(np.mean([r["zeta"] for r in rows if r["epoch"] == epoch]))
        log.info("epoch %d mean zeta %.6f", epoch, mean_zeta)
        if on_epoch is not None:
            on_epoch(epoch, mean_zeta)
        if out_dir is not None and hp.checkpoint_every and (epoch + 1) % hp.checkpoint_every == 0:
            save_checkpoint(out_dir / f"epoch_{epoch + 1:04d}.dsc", Checkpoint.capture(net, opt, hp, epoch + 1))
    net.eval()
    ckpt = Checkpoint.capture(net, opt, hp, hp.epochs)
    if out_dir is not None:
        save_checkpoint(out_dir / "checkpoint.dsc", ckpt)
        write_loss_csv(rows, out_dir / "loss.csv")
    return TrainResult(checkpoint=ckpt, log=rows, net=net)
