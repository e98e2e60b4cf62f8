"""Meta-training over inference tasks, the optimiser and checkpoints.

Checkpoint layout (all integers little-endian)::

    b"PFBR" | u32 version | u32 header length | JSON header (sorted keys)
    | f64 payload: every parameter segment, then Adam m, then Adam v
    | u32 CRC32 of everything before it
"""
import hashlib
import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from .errors import (IoError, ConfigError, FormatVersionMismatchError, NonFiniteError,
                     PFBRError, ShapeMismatchError, TrainingDivergedError)
from .flownet import FlowDims, FlowParams
from .autodiff import ParamVector
from .ode import IntegratorConfig
from .particle_flow import grad_adjoint, grad_backprop, initial_ensemble, draw_noise, task_loss
from .rng import Rng

MAGIC = b"PFBR"
VERSION = 1


def config_fingerprint(obj):
    """Short SHA-256 digest of the canonical JSON form of ``obj``."""
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_jsonable)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def _jsonable(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot serialise {type(o).__name__}")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 200
    lr: float = 1e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    vali_every: int = 10
    seed: int = 0
    gradient: str = "backprop"
    n_particles: int = 128
    clip: float = 10.0
    integrator: IntegratorConfig = field(default_factory=IntegratorConfig)

    def __post_init__(self):
        if int(self.iterations) < 1:
            raise ConfigError("iterations: must be >= 1")
        if int(self.vali_every) < 1:
            raise ConfigError("vali_every: must be >= 1")
        if not self.lr > 0:
            raise ConfigError("lr: must be positive")
        if self.optimizer not in ("adam", "sgd"):
            raise ConfigError(f"optimizer: unknown optimiser {self.optimizer!r}")
        if self.gradient not in ("backprop", "adjoint"):
            raise ConfigError(f"gradient: unknown gradient method {self.gradient!r}")
        if int(self.n_particles) < 1:
            raise ConfigError("n_particles: must be >= 1")
        if self.clip is not None and not self.clip > 0:
            raise ConfigError("clip: must be positive or null")
        if isinstance(self.integrator, dict):
            object.__setattr__(self, "integrator", _integrator(self.integrator))

    @classmethod
    def from_dict(cls, spec):
        known = {f.name for f in fields(cls)}
        bad = sorted(set(spec) - known)
        if bad:
            raise ConfigError(f"unknown training keys: {', '.join(bad)}")
        return cls(**spec)

    def to_dict(self):
        out = asdict(self)
        out["integrator"] = asdict(self.integrator)
        return out


def _integrator(spec):
    known = {f.name for f in fields(IntegratorConfig)}
    bad = sorted(set(spec) - known)
    if bad:
        raise ConfigError(f"unknown integrator keys: {', '.join(bad)}")
    return IntegratorConfig(**spec)


# ------------------------------------------------------------------ optimiser

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(params, grad, state, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
    """Bias-corrected Adam; ``params``/``grad`` are arrays or ParamVectors."""
    p = getattr(params, "values", params)
    g = getattr(grad, "values", grad)
    if p.shape != g.shape or state.m.shape != p.shape:
        raise ShapeMismatchError("parameter, gradient and optimiser shapes differ")
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * g
    v = beta2 * state.v + (1.0 - beta2) * g * g
    mhat = m / (1.0 - beta1 ** t)
    vhat = v / (1.0 - beta2 ** t)
    new = p - lr * mhat / (np.sqrt(vhat) + eps)
    new_state = AdamState(m, v, t)
    if isinstance(params, ParamVector):
        return params.with_values(new), new_state
    return new, new_state


def clip_by_norm(g, max_norm):
    if max_norm is None:
        return g
    norm = float(np.linalg.norm(g))
    return g * (max_norm / norm) if norm > max_norm else g


# ------------------------------------------------------------------ training

class TrainHistory(list):
    """Per-iteration rows ``{"iteration", "train_loss", "vali_loss"}``.

    Also carries the final optimiser state so a checkpoint can be written.
    """

    best_vali = math.inf
    best_iteration = 0
    final_params = None
    adam = None
    rng_state = None


def _vali_loss(tasks, params, cfg):
    total = 0.0
    for i, task in enumerate(tasks):
        rng = Rng(cfg.seed).spawn(1_000_000 + i)
        total += task_loss(task, params, cfg.integrator, rng=rng, n_particles=cfg.n_particles)[0]
    return total / len(tasks)


def meta_train(train_tasks, vali_tasks, cfg, params=None, dims=None, checkpoint_path=None,
               log=None):
    """Stochastic meta-training over tasks.

    Each iteration samples one task uniformly with replacement, draws
    ``n_particles`` prior particles, takes a clipped gradient step, and every
    ``vali_every`` iterations scores the mean validation loss. All randomness
    derives from ``cfg.seed``.

    Returns
    -------
    best_params : FlowParams
        Parameters with the lowest recorded validation loss.
    history : TrainHistory
    """
    if not train_tasks or not vali_tasks:
        raise ConfigError("training and validation task sets must be non-empty")
    if params is None:
        if dims is None:
            raise ConfigError("pass initial params or flow dims")
        params = FlowParams.init(dims, Rng(cfg.seed).spawn(0))
    grad_fn = grad_backprop if cfg.gradient == "backprop" else grad_adjoint
    adam = AdamState.zeros(params.size)
    history = TrainHistory()
    best = params
    for it in range(1, cfg.iterations + 1):
        rng = Rng(cfg.seed).spawn(it)
        task = train_tasks[rng.integers(len(train_tasks))]
        try:
            ens = initial_ensemble(task.prior, rng, cfg.n_particles)
            noise = draw_noise(task.model, rng, cfg.n_particles, task.M)
            loss, grad = grad_fn(task, params, cfg.integrator, ensemble=ens, noise=noise)
            if not np.isfinite(loss):
                raise NonFiniteError("training loss is not finite")
        except NonFiniteError as err:
            path = None
            if checkpoint_path is not None:
                save_checkpoint(Checkpoint(params, adam, it - 1, history.best_vali,
                                           "", rng.get_state()), checkpoint_path)
                path = str(checkpoint_path)
            raise TrainingDivergedError(f"iteration {it}: {err}", it, path) from err
        except PFBRError as err:
            err.iteration = it
            raise
        g = clip_by_norm(grad.values, cfg.clip)
        if cfg.optimizer == "adam":
            params, adam = adam_step(params.vector, g, adam, cfg.lr, cfg.beta1, cfg.beta2,
                                     cfg.eps)
        else:
            params = params.vector.with_values(params.vector.values - cfg.lr * g)
        params = FlowParams(best.dims, params)
        row = {"iteration": it, "train_loss": float(loss), "vali_loss": None}
        if it % cfg.vali_every == 0:
            v = _vali_loss(vali_tasks, params, cfg)
            row["vali_loss"] = v
            if v < history.best_vali:
                history.best_vali, history.best_iteration, best = v, it, params
        history.append(row)
        if log is not None:
            log(row)
    if history.best_iteration == 0:
        best = params
    history.final_params = params
    history.adam = adam
    history.rng_state = Rng(cfg.seed).spawn(cfg.iterations + 1).get_state()
    return best, history


# ------------------------------------------------------------------ checkpoints

@dataclass
class Checkpoint:
    params: FlowParams
    adam: AdamState
    iteration: int = 0
    vali_loss: float = None
    fingerprint: str = ""
    rng_state: dict = None


def _encode(ckpt):
    dims = ckpt.params.dims
    vec = ckpt.params.vector
    adam = ckpt.adam or AdamState.zeros(vec.size)
    vali = ckpt.vali_loss
    header = {
        "dims": dims.to_dict(),
        "iteration": int(ckpt.iteration),
        "vali_loss": None if vali is None or not math.isfinite(vali) else float(vali),
        "fingerprint": ckpt.fingerprint,
        "rng_state": ckpt.rng_state,
        "adam_t": int(adam.t),
        "segments": [[n, list(sh)] for n, _, sh in vec.layout],
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = np.concatenate([vec.values, adam.m, adam.v]).astype("<f8").tobytes()
    body = MAGIC + struct.pack("<II", VERSION, len(hb)) + hb + payload
    return body + struct.pack("<I", zlib.crc32(body))


def save_checkpoint(ckpt, path):
    data = _encode(ckpt)
    try:
        with open(path, "wb") as fh:
            fh.write(data)
    except OSError as err:
        raise IoError(f"cannot write checkpoint {path}: {err}") from err


def load_checkpoint(path, dims=None):
    """Read and validate a checkpoint; ``dims`` checks it against a model."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as err:
        raise IoError(f"cannot read checkpoint {path}: {err}") from err
    if len(data) < 12:
        raise IoError("checkpoint is truncated")
    if data[:4] != MAGIC:
        raise FormatVersionMismatchError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != VERSION:
        raise FormatVersionMismatchError(f"checkpoint version {version}, expected {VERSION}")
    body, crc = data[:-4], data[-4:]
    if len(data) < 16 or struct.unpack("<I", crc)[0] != zlib.crc32(body):
        raise IoError("checkpoint checksum mismatch (corrupt or truncated)")
    try:
        header = json.loads(body[12:12 + hlen].decode())
        stored = FlowDims(**header["dims"])
        segments = [(n, tuple(sh)) for n, sh in header["segments"]]
    except (ValueError, KeyError, TypeError) as err:
        raise IoError(f"checkpoint header unreadable: {err}") from err
    if dims is not None:
        want = dims.shapes()
        for name, shape in segments:
            if name not in want or tuple(want[name]) != shape:
                raise ShapeMismatchError(
                    f"segment {name!r}: checkpoint has shape {shape}, model expects "
                    f"{want.get(name)}")
        missing = [n for n in want if n not in dict(segments)]
        if missing:
            raise ShapeMismatchError(f"segment {missing[0]!r} missing from checkpoint")
    n = sum(int(np.prod(sh)) for _, sh in segments)
    raw = body[12 + hlen:]
    if len(raw) != 3 * n * 8:
        raise IoError("checkpoint payload has the wrong length")
    flat = np.frombuffer(raw, dtype="<f8").astype(np.float64)
    layout, off = [], 0
    for name, shape in segments:
        layout.append((name, off, shape))
        off += int(np.prod(shape))
    params = FlowParams(stored, ParamVector(flat[:n], layout))
    adam = AdamState(flat[n:2 * n].copy(), flat[2 * n:].copy(), header["adam_t"])
    return Checkpoint(params, adam, header["iteration"], header["vali_loss"],
                      header["fingerprint"], header["rng_state"])
