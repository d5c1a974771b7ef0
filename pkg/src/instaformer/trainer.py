"""Adam, learning-rate schedule, the alternating D/G step, checkpoints and the run loop."""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import engine as E
from .aggregator import AggregatorConfig
from .backbone import BackboneConfig, Discriminator, sample_style
from .data import Sample, load_batch, read_dataset
from .engine import NonFiniteError, Tensor
from .losses import (
    ENCODER_TAPS,
    LossReport,
    LossWeights,
    NceConfig,
    NceHeads,
    discriminator_loss,
    generator_adv_loss,
    global_content_loss,
    image_recon_loss,
    instance_content_loss,
    style_recon_loss,
    total_loss,
)
from .model import InstaFormer

logger = logging.getLogger(__name__)

SCHEDULES = ("linear", "step", "constant")
DTYPES = ("float64", "float32")
CSV_HEADER = ("step", "gan_d", "gan_g", "nce_global", "nce_ins", "recon_img", "recon_style",
              "total", "lr")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 2e-4
    batch: int = 2
    steps: int = 2000
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    schedule: str = "linear"
    seed: int = 0
    ckpt_every: int = 500
    dtype: str = "float64"
    gan_mode: str = "logistic"
    weights: LossWeights = field(default_factory=LossWeights)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    nce: NceConfig = field(default_factory=NceConfig)

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError(f"lr must be > 0, got {self.lr}")
        if self.batch < 1:
            raise ValueError(f"batch must be >= 1, got {self.batch}")
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise ValueError(f"{name} must be in [0, 1)")
        if self.eps <= 0:
            raise ValueError("eps must be > 0")
        if self.schedule not in SCHEDULES:
            raise ValueError(f"schedule must be one of {SCHEDULES}, got {self.schedule!r}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {DTYPES}, got {self.dtype!r}")
        if self.gan_mode not in ("logistic", "lsgan"):
            raise ValueError(f"unknown gan_mode {self.gan_mode!r}")
        if self.ckpt_every < 0:
            raise ValueError("ckpt_every must be >= 0 (0 disables periodic checkpoints)")
        if self.backbone.feature_size % self.aggregator.patch_stride:
            raise ValueError(f"patch_stride {self.aggregator.patch_stride} does not divide the "
                             f"feature size {self.backbone.feature_size}")

    def as_dict(self) -> dict:
        return asdict(self)


# -- optimizer ---------------------------------------------------------------------------

def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, lr: float,
              beta1: float, beta2: float, eps: float, t: int):
    """One bias-corrected Adam update. Returns new ``(param, m, v)``."""
    if t < 1:
        raise ValueError(f"adam_step: t must be >= 1, got {t}")
    if not (param.shape == grad.shape == m.shape == v.shape):
        raise E.ShapeError(f"adam_step: shapes differ: param {param.shape}, grad {grad.shape}, "
                           f"m {m.shape}, v {v.shape}")
    m = beta1 * m + (1 - beta1) * grad
    v = beta2 * v + (1 - beta2) * grad * grad
    m_hat = m / (1 - beta1 ** t)
    v_hat = v / (1 - beta2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Adam over a fixed, named parameter set. Moments are kept per name."""

    def __init__(self, named_params, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.params: dict[str, Tensor] = dict(named_params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in self.params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in self.params.items()}

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self, lr: float, t: int) -> None:
        for k, p in self.params.items():
            if p.grad is None:
                g = np.zeros_like(p.data)
            else:
                g = p.grad.astype(p.dtype, copy=False)
            p.data, self.m[k], self.v[k] = adam_step(p.data, g, self.m[k], self.v[k], lr,
                                                     self.beta1, self.beta2, self.eps, t)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Learning rate for 0-based ``step`` out of ``cfg.steps``."""
    total = cfg.steps
    if not 0 <= step <= total:
        raise ValueError(f"lr_at: step {step} outside [0, {total}]")
    if cfg.schedule == "constant":
        return cfg.lr
    half = total / 2
    if cfg.schedule == "step":
        # halve at the midpoint and again at three quarters
        return cfg.lr * (0.5 ** ((step >= half) + (step >= 0.75 * total)))
    if step < half:
        return cfg.lr
    return cfg.lr * (total - step) / (total - half)


# -- state -------------------------------------------------------------------------------

class TrainState:
    """Generator side (model + projection heads) and discriminator with their optimizers."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.dtype = np.dtype(cfg.dtype)
        with E.default_dtype(self.dtype):
            self.model = InstaFormer(cfg.backbone, cfg.aggregator, np.random.default_rng([cfg.seed, 0]))
            self.heads = NceHeads(self.model.tap_channels(), cfg.nce, np.random.default_rng([cfg.seed, 1]))
            self.disc = Discriminator(cfg.backbone, np.random.default_rng([cfg.seed, 2]))
        self.step = 0
        self.opt_g = Adam(self.g_named_parameters(), cfg.beta1, cfg.beta2, cfg.eps)
        self.opt_d = Adam(self.d_named_parameters(), cfg.beta1, cfg.beta2, cfg.eps)

    def g_named_parameters(self):
        yield from self.model.named_parameters("model.")
        yield from self.heads.named_parameters("heads.")

    def d_named_parameters(self):
        yield from self.disc.named_parameters("disc.")

    def records(self) -> dict[str, np.ndarray]:
        """Every array a checkpoint stores, by record name."""
        out = {}
        for prefix, opt in (("g", self.opt_g), ("d", self.opt_d)):
            for k, p in opt.params.items():
                out[k] = p.data
            for k in opt.params:
                out[f"adam_{prefix}.m.{k}"] = opt.m[k]
                out[f"adam_{prefix}.v.{k}"] = opt.v[k]
        return out

    def load_records(self, recs: dict[str, np.ndarray]) -> None:
        expected = self.records()
        missing = set(expected) - set(recs)
        unknown = set(recs) - set(expected)
        if missing or unknown:
            raise ValueError(f"checkpoint does not match the architecture: missing "
                             f"{sorted(missing)[:5]}, unexpected {sorted(unknown)[:5]}")
        for name, arr in expected.items():
            if recs[name].shape != arr.shape:
                raise ValueError(f"checkpoint shape mismatch for {name}: "
                                 f"{recs[name].shape} vs {arr.shape}")
        for prefix, opt in (("g", self.opt_g), ("d", self.opt_d)):
            for k, p in opt.params.items():
                p.data = recs[k].astype(self.dtype)
                opt.m[k] = recs[f"adam_{prefix}.m.{k}"].astype(self.dtype)
                opt.v[k] = recs[f"adam_{prefix}.v.{k}"].astype(self.dtype)


# -- one step ----------------------------------------------------------------------------

def _value(t) -> float:
    return float(t.item()) if isinstance(t, Tensor) else float(t)


def generator_terms(state: TrainState, x: Tensor, boxes, y: Tensor, s: np.ndarray,
                    rng: np.random.Generator, y_hat=None, taps_x=None) -> tuple[dict, Tensor]:
    """Generator-side loss terms (as tensors) and the translation ŷ."""
    model, cfg = state.model, state.cfg
    if y_hat is None:
        y_hat, taps_x, _ = model.translate(x, boxes, s)
    _, taps_y = model.content_encoder(y_hat, taps=True)
    sel_x = [taps_x[i] for i in _tap_indices(cfg.nce)]
    sel_y = [taps_y[i] for i in _tap_indices(cfg.nce)]
    terms = {
        "gan_g": generator_adv_loss(state.disc(y_hat), cfg.gan_mode),
        "nce_global": global_content_loss(sel_x, sel_y, state.heads, cfg.nce, rng),
        "nce_instance": instance_content_loss(taps_x[-1], taps_y[-1], boxes, state.heads, cfg.nce),
        "recon_img": image_recon_loss(y, model),
        "recon_style": style_recon_loss(y_hat, Tensor(s), model.style_encoder),
    }
    return terms, y_hat


def _tap_indices(nce: NceConfig) -> list[int]:
    return [ENCODER_TAPS.index(name) for name in nce.layers]


def train_step(state: TrainState, x: Tensor, boxes, y: Tensor, rng: np.random.Generator) -> LossReport:
    """Discriminator update, then generator-side update. Advances ``state.step``."""
    cfg = state.cfg
    t = state.step + 1
    lr = lr_at(min(state.step, cfg.steps), cfg)
    with E.default_dtype(state.dtype):
        s = sample_style(rng, cfg.backbone.style_dim, x.shape[0]).astype(state.dtype)
        y_hat, taps_x, _ = state.model.translate(x, boxes, s)

        state.opt_d.zero_grad()
        loss_d = discriminator_loss(state.disc(y), state.disc(y_hat.detach()), cfg.gan_mode)
        if not np.isfinite(loss_d.item()):
            raise NonFiniteError(f"step {state.step}: non-finite discriminator loss {loss_d.item()}")
        E.backward(loss_d)
        state.opt_d.step(lr, t)

        state.opt_g.zero_grad()
        terms, _ = generator_terms(state, x, boxes, y, s, rng, y_hat, taps_x)
        total = total_loss(terms, cfg.weights)
        values = {k: _value(v) for k, v in terms.items()}
        if not np.isfinite(total.item()):
            dump = ", ".join(f"{k}={v:.6g}" for k, v in values.items())
            raise NonFiniteError(f"step {state.step}: non-finite generator loss ({dump})")
        E.backward(total)
        # the adversarial term reaches D's weights; those gradients are discarded
        state.opt_d.zero_grad()
        state.opt_g.step(lr, t)
    state.step += 1
    return LossReport(gan_d=_value(loss_d), gan_g=values["gan_g"],
                      nce_global=values["nce_global"], nce_instance=values["nce_instance"],
                      recon_img=values["recon_img"], recon_style=values["recon_style"],
                      total=_value(total))


def step_rng(seed: int, step: int) -> np.random.Generator:
    """Per-step stream; resuming at step k replays exactly what step k would have drawn."""
    return np.random.default_rng([seed, step, 7])


def draw_batch(samples_a, samples_b, batch: int, rng: np.random.Generator, dtype):
    ia = rng.choice(len(samples_a), batch, replace=len(samples_a) < batch)
    ib = rng.choice(len(samples_b), batch, replace=len(samples_b) < batch)
    x, boxes = load_batch(samples_a, ia, dtype)
    y, _ = load_batch(samples_b, ib, dtype)
    return x, boxes, y


# -- checkpoints -------------------------------------------------------------------------

CKPT_MAGIC = b"IFCK"
CKPT_VERSION = 1


def save_checkpoint(path, step: int, records: dict[str, np.ndarray]) -> None:
    """Magic, version u32, step u64, then (name len u32, name, rank u32, dims u64…, f64 LE payload)."""
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, step)]
    for name, arr in records.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}Q", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(b"".join(parts))
    tmp.replace(path)


def load_checkpoint(path) -> tuple[int, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: bad checkpoint magic {raw[:4]!r}")
    if len(raw) < 16:
        raise ValueError(f"{path}: truncated checkpoint header")
    version, step = struct.unpack_from("<IQ", raw, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos, recs = 16, {}
    try:
        while pos < len(raw):
            (n,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            name = raw[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", raw, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", raw, pos)
            pos += 8 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if pos + 8 * count > len(raw):
                raise ValueError("payload runs past end of file")
            recs[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims).copy()
            pos += 8 * count
    except (struct.error, UnicodeDecodeError) as err:
        raise ValueError(f"{path}: corrupt checkpoint ({err})") from None
    return step, recs


def save_state(path, state: TrainState) -> None:
    save_checkpoint(path, state.step, state.records())


def load_state(path, cfg: TrainConfig) -> TrainState:
    step, recs = load_checkpoint(path)
    state = TrainState(cfg)
    state.load_records(recs)
    state.step = step
    return state


# -- run loop ----------------------------------------------------------------------------

def _as_samples(src) -> list[Sample]:
    if isinstance(src, (str, Path)):
        samples = read_dataset(src)
        if not samples:
            raise ValueError(f"dataset {src} is empty")
        return samples
    return list(src)


def train(cfg: TrainConfig, data_a, data_b, out_dir=None, resume=None, steps: int | None = None,
          state: TrainState | None = None, on_step=None,
          run_record: dict | None = None) -> tuple[TrainState, list[LossReport]]:
    """Run ``cfg.steps`` steps (or ``steps`` more) from scratch, a checkpoint, or ``state``.

    ``data_a``/``data_b`` are dataset directories or lists of samples. With
    ``out_dir`` set, writes ``run.json`` (``run_record`` if given, else
    ``cfg``), ``metrics.csv`` (one row per step) and ``ckpt_<step>.ifck``
    every ``cfg.ckpt_every`` steps plus ``final.ifck``.
    """
    samples_a, samples_b = _as_samples(data_a), _as_samples(data_b)
    if state is None:
        state = load_state(resume, cfg) if resume else TrainState(cfg)
    end = cfg.steps if steps is None else state.step + steps
    out = Path(out_dir) if out_dir is not None else None
    writer = fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        record = run_record if run_record is not None else cfg.as_dict()
        (out / "run.json").write_text(json.dumps(record, indent=2) + "\n")
        csv_path = out / "metrics.csv"
        fresh = not (resume and csv_path.exists())
        if not fresh:
            _truncate_csv(csv_path, state.step)
        fh = open(csv_path, "w" if fresh else "a", newline="")
        writer = csv.writer(fh)
        if fresh:
            writer.writerow(CSV_HEADER)
    reports = []
    try:
        while state.step < end:
            k = state.step
            rng = step_rng(cfg.seed, k)
            x, boxes, y = draw_batch(samples_a, samples_b, cfg.batch, rng, state.dtype)
            t0 = time.perf_counter()
            rep = train_step(state, x, boxes, y, rng)
            reports.append(rep)
            lr = lr_at(min(k, cfg.steps), cfg)
            logger.debug("step %d total %.4f (%.2fs)", k, rep.total, time.perf_counter() - t0)
            if writer is not None:
                writer.writerow([k, rep.gan_d, rep.gan_g, rep.nce_global, rep.nce_instance,
                                 rep.recon_img, rep.recon_style, rep.total, lr])
                fh.flush()
                if cfg.ckpt_every and state.step % cfg.ckpt_every == 0:
                    save_state(out / f"ckpt_{state.step:06d}.ifck", state)
            if on_step is not None:
                on_step(state, rep)
        if out is not None:
            save_state(out / "final.ifck", state)
    finally:
        if fh is not None:
            fh.close()
    return state, reports


def _truncate_csv(path: Path, step: int) -> None:
    """Drop rows at or past ``step`` so a resumed run appends without duplicates."""
    lines = path.read_text().splitlines()
    kept = lines[:1] + [ln for ln in lines[1:] if ln and int(ln.split(",")[0]) < step]
    path.write_text("".join(ln + "\n" for ln in kept))
