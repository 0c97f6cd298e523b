"""The denoising network, its losses, training loop and checkpoints.

Every point's coordinates pass through a shared MLP to give local features.
A column-wise max over points gives one global feature row, which is
broadcast and concatenated to each point's local features. A second shared
MLP maps the result to an unnormalized plane ``(a, c)`` per point, and each
noisy point is projected onto its plane.
"""

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import rng
from .errors import ConfigError, FormatError, NumericalError, UsageError
from .geom import PlaneSet, as_cloud, planes_from_raw, project_cloud

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"NPD1"
CHECKPOINT_VERSION = 1


@dataclass
class AlphaSchedule:
    start: float = 0.1
    end: float = 0.9
    epochs: int = 100


@dataclass
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class NetConfig:
    local_widths: list = field(default_factory=lambda: [64, 128, 512])
    head_widths: list = field(default_factory=lambda: [256, 64, 4])
    use_global: bool = True
    alpha_schedule: AlphaSchedule = field(default_factory=AlphaSchedule)
    optimizer: AdamConfig = field(default_factory=AdamConfig)
    batch_clouds: int = 1
    resample_noise: bool = False
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.alpha_schedule, dict):
            self.alpha_schedule = AlphaSchedule(**self.alpha_schedule)
        if isinstance(self.optimizer, dict):
            self.optimizer = AdamConfig(**self.optimizer)
        self.local_widths = [int(w) for w in self.local_widths]
        self.head_widths = [int(w) for w in self.head_widths]
        self.validate()

    def validate(self):
        if not self.local_widths or not self.head_widths:
            raise ConfigError("local_widths and head_widths must be non-empty")
        if any(w < 1 for w in self.local_widths + self.head_widths):
            raise ConfigError("layer widths must be positive")
        if self.head_widths[-1] != 4:
            raise ConfigError(f"last head width must be 4, got {self.head_widths[-1]}")
        s = self.alpha_schedule
        for name in ("start", "end"):
            v = getattr(s, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"alpha_schedule.{name} must be in [0, 1], got {v}")
        if s.epochs < 1:
            raise ConfigError("alpha_schedule.epochs must be >= 1")
        if self.batch_clouds < 1:
            raise ConfigError("batch_clouds must be >= 1")
        o = self.optimizer
        if not (o.lr > 0 and 0 <= o.beta1 < 1 and 0 <= o.beta2 < 1 and o.eps > 0):
            raise ConfigError(f"invalid optimizer settings {o}")

    @property
    def feature_width(self):
        return self.local_widths[-1]

    def layer_shapes(self):
        """``[(name, fan_in, fan_out), ...]`` for every dense layer."""
        local = list(self.local_widths)
        if not self.use_global:
            # keep the head's input width equal to the global variant's
            local[-1] = 2 * local[-1]
        shapes, width = [], 3
        for i, w in enumerate(local):
            shapes.append((f"local.{i}", width, w))
            width = w
        width = local[-1] if not self.use_global else 2 * local[-1]
        for i, w in enumerate(self.head_widths):
            shapes.append((f"head.{i}", width, w))
            width = w
        return shapes

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown network config keys: {sorted(unknown)}")
        return cls(**d)


def init_params(config, seed=None):
    """He-uniform weights, zero biases, drawn from a seeded Philox stream."""
    gen = rng.generator(config.seed if seed is None else seed, stream=0x1417)
    params = {}
    for name, fan_in, fan_out in config.layer_shapes():
        bound = math.sqrt(6.0 / fan_in)
        params[f"{name}.weight"] = gen.uniform(-bound, bound, size=(fan_in, fan_out))
        params[f"{name}.bias"] = np.zeros(fan_out)
    return params


def check_params(params, config):
    for name, fan_in, fan_out in config.layer_shapes():
        for key, shape in ((f"{name}.weight", (fan_in, fan_out)), (f"{name}.bias", (fan_out,))):
            if key not in params:
                raise ConfigError(f"missing parameter {key}")
            if tuple(np.shape(_data(params[key]))) != shape:
                raise ConfigError(f"parameter {key} has shape {np.shape(_data(params[key]))}, expected {shape}")


def _data(x):
    return x.data if isinstance(x, ad.Tensor) else x


def _as_tensors(params):
    return {k: v if isinstance(v, ad.Tensor) else ad.Tensor(v) for k, v in params.items()}


def _mlp(x, params, prefix, n_layers, final_linear):
    for i in range(n_layers):
        x = ad.add_bias(ad.matmul(x, params[f"{prefix}.{i}.weight"]), params[f"{prefix}.{i}.bias"])
        if not (final_linear and i == n_layers - 1):
            x = ad.relu(x)
    return x


def encode(noisy, params, config):
    """Local ``N x d`` features and the ``1 x d`` global feature (``None`` when disabled)."""
    params = _as_tensors(params)
    x = ad.Tensor(as_cloud(noisy, "noisy cloud"))
    local = _mlp(x, params, "local", len(config.local_widths), final_linear=False)
    glob = ad.maxpool_cols(local) if config.use_global else None
    return local, glob


def forward(noisy, params, config):
    """Raw per-point planes, an ``N x 4`` tensor (final layer linear)."""
    check_params(params, config)
    params = _as_tensors(params)
    local, glob = encode(noisy, params, config)
    if glob is not None:
        feats = ad.concat_cols(local, ad.broadcast_row(glob, local.shape[0]))
    else:
        feats = local
    return _mlp(feats, params, "head", len(config.head_widths), final_linear=True)


def loss1(denoised, clean):
    """Mean over points of the squared distance to the clean point."""
    denoised, clean = ad._wrap(denoised), ad._wrap(clean)
    if denoised.shape != clean.shape:
        raise UsageError(f"loss1: shapes {tuple(denoised.shape)} and {tuple(clean.shape)} differ")
    return ad.mean_all(ad.row_sqnorm(ad.sub(denoised, clean)))


def loss2(pred_raw, ref_planes, zero_rows="raise"):
    """Mean of ``|1 - cos|`` between predicted and reference ``(a, c)`` rows.

    An all-zero prediction row raises, or with ``zero_rows="zero"`` counts as
    cosine 0 (a constant 1 in the mean, no gradient); training uses the latter.
    """
    pred_raw = ad._wrap(pred_raw)
    ref = ref_planes.as_array() if isinstance(ref_planes, PlaneSet) else np.asarray(ref_planes, dtype=np.float64)
    if pred_raw.shape != ref.shape:
        raise UsageError(f"loss2: {pred_raw.shape[0]} predictions for {ref.shape[0]} reference planes")
    cos = ad.cosine_sim_rows(pred_raw, ad.Tensor(ref), zero_rows=zero_rows)
    return ad.mean_all(ad.absolute(ad.rsub_scalar(1.0, cos)))


def combined_loss(l1, l2, alpha):
    if not 0.0 <= alpha <= 1.0:
        raise ConfigError(f"alpha must be in [0, 1], got {alpha}")
    if alpha == 1.0:
        return ad._wrap(l1)
    if alpha == 0.0:
        return ad._wrap(l2)
    return ad.add(ad.scale(l1, alpha), ad.scale(l2, 1.0 - alpha))


def alpha_at(epoch, schedule):
    """Linear ramp from ``start`` at epoch 0 to ``end`` at the last epoch."""
    if schedule.epochs <= 1:
        return float(schedule.start)
    t = min(max(epoch, 0), schedule.epochs - 1) / (schedule.epochs - 1)
    return float(schedule.start + (schedule.end - schedule.start) * t)


def step_losses(noisy, clean, ref_planes, params, config, alpha):
    """Forward pass and losses for one cloud: ``(loss, loss1, loss2, n_degenerate)``."""
    raw = forward(noisy, params, config)
    denoised, bad = ad.project_onto_raw_planes(raw, ad.Tensor(as_cloud(noisy)))
    l1 = loss1(denoised, ad.Tensor(as_cloud(clean)))
    l2 = loss2(raw, ref_planes, zero_rows="zero")
    return combined_loss(l1, l2, alpha), l1, l2, int(bad.sum())


def denoise(noisy, params, config):
    """Project each noisy point onto its predicted plane.

    Returns ``(denoised_cloud, PlaneSet)``; degenerate rows leave their point
    unchanged.
    """
    out, planes, _ = denoise_with_mask(noisy, params, config)
    return out, planes


def denoise_with_mask(noisy, params, config):
    """:func:`denoise` plus the boolean mask of degenerate rows."""
    pts = as_cloud(noisy, "noisy cloud")
    raw = forward(pts, params, config).data
    planes, bad = planes_from_raw(raw, pts)
    out = project_cloud(pts, planes)
    out[bad] = pts[bad]
    return out, planes, bad


class Adam:
    """Adaptive-moment optimizer over a dict of float64 arrays."""

    def __init__(self, cfg):
        self.cfg = cfg
        self.m = {}
        self.v = {}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c = self.cfg
        bc1 = 1.0 - c.beta1 ** self.t
        bc2 = 1.0 - c.beta2 ** self.t
        for k in sorted(params):
            g = grads[k]
            if k not in self.m:
                self.m[k] = np.zeros_like(params[k])
                self.v[k] = np.zeros_like(params[k])
            self.m[k] = c.beta1 * self.m[k] + (1.0 - c.beta1) * g
            self.v[k] = c.beta2 * self.v[k] + (1.0 - c.beta2) * (g * g)
            params[k] = params[k] - c.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + c.eps)


@dataclass
class EpochRecord:
    epoch: int
    alpha: float
    loss: float
    loss1: float
    loss2: float
    val_mse: float | None = None
    val_cd: float | None = None


@dataclass
class TrainHistory:
    records: list = field(default_factory=list)

    def append(self, rec):
        if self.records and rec.epoch != self.records[-1].epoch + 1:
            raise UsageError("history epochs must be consecutive")
        self.records.append(rec)

    def column(self, name):
        return [getattr(r, name) for r in self.records]

    def to_dicts(self):
        return [asdict(r) for r in self.records]

    def write_csv(self, path):
        cols = list(EpochRecord.__dataclass_fields__)
        lines = [",".join(cols)]
        for r in self.records:
            lines.append(",".join("" if getattr(r, c) is None else repr(getattr(r, c)) for c in cols))
        Path(path).write_text("\n".join(lines) + "\n")


@dataclass
class TrainSample:
    id: str
    clean: np.ndarray
    noisy: np.ndarray
    planes: PlaneSet
    sigma: float = 0.0


def train(samples, config, epochs=None, val_samples=(), on_epoch=None):
    """Fit the network to ``samples`` (a sequence of :class:`TrainSample`).

    ``epochs`` defaults to ``config.alpha_schedule.epochs``. Clouds are
    visited in a seeded shuffled order each epoch; gradients of
    ``batch_clouds`` consecutive clouds are averaged before each optimizer
    step. Returns ``(params, TrainHistory)``.
    """
    from .metrics import chamfer, mse

    samples = list(samples)
    if not samples:
        raise UsageError("training set is empty")
    epochs = config.alpha_schedule.epochs if epochs is None else int(epochs)
    params = init_params(config)
    opt = Adam(config.optimizer)
    history = TrainHistory()
    for epoch in range(epochs):
        alpha = alpha_at(epoch, config.alpha_schedule)
        order = rng.generator(config.seed, stream=0x5EED0000 + epoch).permutation(len(samples))
        sums = np.zeros(3)
        for start in range(0, len(order), config.batch_clouds):
            batch = order[start:start + config.batch_clouds]
            grads = {k: np.zeros_like(v) for k, v in params.items()}
            for ci in batch:
                s = samples[ci]
                noisy = s.noisy
                if config.resample_noise and s.sigma > 0:
                    key = rng.stream_key(config.seed, (epoch << 32) + int(ci) + 1)
                    noisy = s.clean + s.sigma * rng.normals(key, np.arange(s.clean.shape[0]), 3)
                tparams = {k: ad.Tensor(v, requires_grad=True) for k, v in params.items()}
                try:
                    loss, l1, l2, _ = step_losses(noisy, s.clean, s.planes, tparams, config, alpha)
                    vals = (loss.item(), l1.item(), l2.item())
                    if not all(math.isfinite(v) for v in vals):
                        raise NumericalError("non-finite loss")
                    ad.backward(loss)
                except NumericalError as exc:
                    raise NumericalError(f"epoch {epoch}, cloud {s.id}: {exc}") from exc
                for k, t in tparams.items():
                    if t.grad is not None:
                        grads[k] += t.grad
                sums += vals
            for k in grads:
                grads[k] /= len(batch)
            opt.step(params, grads)
        for k, v in params.items():
            if not np.all(np.isfinite(v)):
                raise NumericalError(f"parameter {k} became non-finite at epoch {epoch}")
        rec = EpochRecord(epoch, alpha, *(sums / len(samples)).tolist())
        if val_samples:
            m, c = [], []
            for s in val_samples:
                den, _ = denoise(s.noisy, params, config)
                m.append(mse(den, s.clean))
                c.append(chamfer(den, s.clean))
            rec.val_mse, rec.val_cd = float(np.mean(m)), float(np.mean(c))
        history.append(rec)
        if on_epoch is not None:
            on_epoch(rec)
    return params, history


# checkpoints -----------------------------------------------------------------

def encode_checkpoint(params, config, meta=None):
    header = json.dumps({"config": config.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    out = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(header)), header,
           struct.pack("<I", len(params))]
    for name in sorted(params):
        arr = np.ascontiguousarray(_data(params[name]), dtype="<f4")
        bname = name.encode()
        out.append(struct.pack("<I", len(bname)) + bname)
        out.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes())
    return b"".join(out)


class _Reader:
    def __init__(self, blob, path):
        self.blob, self.pos, self.path = blob, 0, path

    def take(self, n, what):
        if n < 0 or self.pos + n > len(self.blob):
            raise FormatError(f"{self.path}: truncated while reading {what}")
        chunk = self.blob[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, what):
        return struct.unpack("<I", self.take(4, what))[0]


def decode_checkpoint(blob, path="<bytes>"):
    """Inverse of :func:`encode_checkpoint`: ``(params, config, meta)``."""
    r = _Reader(blob, path)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(r.take(r.u32("header length"), "header").decode())
        config = NetConfig.from_dict(header["config"])
        meta = header.get("meta", {})
    except (ValueError, KeyError, TypeError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt config block ({exc})") from exc
    params = {}
    for _ in range(r.u32("tensor count")):
        try:
            name = r.take(r.u32("name length"), "name").decode()
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: corrupt tensor name") from exc
        rank = r.u32("rank")
        if rank > 8:
            raise FormatError(f"{path}: implausible tensor rank {rank}")
        dims = struct.unpack(f"<{rank}I", r.take(4 * rank, "dims"))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(r.take(4 * count, f"tensor {name}"), dtype="<f4").reshape(dims)
        params[name] = data.astype(np.float64)
    if r.pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - r.pos} trailing bytes")
    try:
        check_params(params, config)
    except ConfigError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return params, config, meta


def save_checkpoint(params, config, path, meta=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(params, config, meta))


def load_checkpoint(path):
    """Returns ``(params, config)``; parameters come back as float64."""
    params, config, _ = load_checkpoint_with_meta(path)
    return params, config


def load_checkpoint_with_meta(path):
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise FormatError(f"{path}: {exc.strerror or exc}") from exc
    return decode_checkpoint(blob, path)
