"""Conditional flow matching over a configurable toy latent space.

A small cross-attention network learns the velocity field that transports
Gaussian noise to per-condition target distributions along straight paths.
Sampling integrates the learned field with forward Euler and optional
classifier-free guidance.  The text condition comes from a whitespace
tokenizer over serialized structured captions, with the view special tokens
kept as atomic vocabulary items.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from . import diffcore
from .captions import AugmentConfig, StructuredCaption, augment_dropout, parse_caption, serialize_caption
from .diffcore import RAW, AdamW, Param, ShapeMismatchError, Tape

TASK_VERSION = "task-v1"

UNK_TOKEN = "<unk>"


class TOutOfRangeError(ValueError):
    pass


class NonFiniteStateError(ArithmeticError):
    pass


class DivergedLossError(ArithmeticError):
    pass


@dataclass(frozen=True)
class LatentSpec:
    """Shape of the generation space: ``frames`` rows of ``dim`` features."""

    dim: int = 8
    frames: int = 4
    frame_rate_hz: float = 25.0

    def __post_init__(self):
        if self.dim < 1 or self.frames < 1:
            raise ValueError("dim and frames must be >= 1")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.frames, self.dim)


@dataclass(frozen=True)
class SamplerConfig:
    steps: int = 25
    cfg_scale: float = 5.0
    rng_seed: int = 0

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if self.cfg_scale < 0:
            raise ValueError("cfg_scale must be >= 0")


@dataclass(frozen=True)
class FlowSample:
    """One training point on the straight noise-to-data path."""

    z0: np.ndarray
    z1: np.ndarray
    t: float
    zt: np.ndarray

    @classmethod
    def at(cls, z0, z1, t: float) -> "FlowSample":
        z0 = diffcore.as_matrix(z0)
        z1 = diffcore.as_matrix(z1)
        return cls(z0, z1, float(t), interpolate(z0, z1, t))


@dataclass(frozen=True)
class ConditionSpec:
    """One synthetic condition: a caption and its target Gaussian."""

    caption: StructuredCaption
    mean: np.ndarray
    sigma: float

    def sample_target(self, rng: np.random.Generator) -> np.ndarray:
        return self.mean + self.sigma * rng.standard_normal(self.mean.shape)


@dataclass(frozen=True)
class SyntheticTask:
    """A handful of captions, each mapped to a Gaussian over the latent space."""

    latent: LatentSpec
    conditions: tuple[ConditionSpec, ...]
    fixed_z0: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.conditions:
            raise ValueError("task needs at least one condition")
        for c in self.conditions:
            if c.mean.shape != self.latent.shape:
                raise ShapeMismatchError(
                    f"condition mean shape {c.mean.shape} != latent shape {self.latent.shape}"
                )
        # Clusters must stay distinguishable, otherwise conditional checks
        # cannot tell a trained model from an untrained one.
        cs = self.conditions
        for i in range(len(cs)):
            for j in range(i + 1, len(cs)):
                sep = float(np.linalg.norm(cs[i].mean - cs[j].mean))
                if sep < 3.0 * max(cs[i].sigma, cs[j].sigma):
                    raise ValueError(
                        f"conditions {i} and {j} overlap: separation {sep:.3f} < 3 sigma"
                    )

    def to_dict(self) -> dict:
        return {
            "version": TASK_VERSION,
            "latent": {
                "dim": self.latent.dim,
                "frames": self.latent.frames,
                "frame_rate_hz": self.latent.frame_rate_hz,
            },
            "fixed_z0": None if self.fixed_z0 is None else self.fixed_z0.tolist(),
            "conditions": [
                {
                    "caption": serialize_caption(c.caption),
                    "mean": c.mean.tolist(),
                    "sigma": c.sigma,
                }
                for c in self.conditions
            ],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "SyntheticTask":
        if doc.get("version") != TASK_VERSION:
            raise ValueError(f"unsupported task version: {doc.get('version')!r}")
        latent = LatentSpec(
            dim=doc["latent"]["dim"],
            frames=doc["latent"]["frames"],
            frame_rate_hz=doc["latent"].get("frame_rate_hz", 25.0),
        )
        conditions = tuple(
            ConditionSpec(
                caption=parse_caption(entry["caption"]),
                mean=diffcore.as_matrix(entry["mean"]),
                sigma=float(entry["sigma"]),
            )
            for entry in doc["conditions"]
        )
        fixed = doc.get("fixed_z0")
        return cls(
            latent=latent,
            conditions=conditions,
            fixed_z0=None if fixed is None else diffcore.as_matrix(fixed),
        )

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "SyntheticTask":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def make_three_cluster_task(separation: float = 3.0, sigma: float = 0.25) -> SyntheticTask:
    """The standard 2-D learning-check task: three equidistant clusters."""
    radius = separation / math.sqrt(3.0)
    angles = [math.pi / 2, math.pi / 2 + 2 * math.pi / 3, math.pi / 2 + 4 * math.pi / 3]
    texts = [
        "<|caption|> calm ambient hum",
        "<|caption|> bright metallic chimes",
        "<|caption|> low rumbling engine",
    ]
    conditions = tuple(
        ConditionSpec(
            caption=parse_caption(text),
            mean=np.array([[radius * math.cos(a), radius * math.sin(a)]]),
            sigma=sigma,
        )
        for text, a in zip(texts, angles)
    )
    return SyntheticTask(latent=LatentSpec(dim=2, frames=1), conditions=conditions)


# ---------------------------------------------------------------------------
# path primitives

def interpolate(z0, z1, t: float) -> np.ndarray:
    """Convex combination (1-t) z0 + t z1 along the straight path."""
    z0 = diffcore.as_matrix(z0)
    z1 = diffcore.as_matrix(z1)
    if z0.shape != z1.shape:
        raise ShapeMismatchError(f"interpolate {z0.shape} vs {z1.shape}")
    t = float(t)
    if not 0.0 <= t <= 1.0:
        raise TOutOfRangeError(f"t must be in [0,1], got {t}")
    return (1.0 - t) * z0 + t * z1


def fm_target(z0, z1) -> np.ndarray:
    """The constant target velocity along the straight path: z1 - z0."""
    z0 = diffcore.as_matrix(z0)
    z1 = diffcore.as_matrix(z1)
    if z0.shape != z1.shape:
        raise ShapeMismatchError(f"fm_target {z0.shape} vs {z1.shape}")
    return z1 - z0


def time_features(t: float, dim: int = 16) -> np.ndarray:
    """1 x dim sinusoidal features of t with geometric frequencies."""
    half = dim // 2
    freqs = np.array([1000.0 ** (i / (half - 1)) for i in range(half)])
    return np.concatenate([np.sin(freqs * t), np.cos(freqs * t)]).reshape(1, dim)


# ---------------------------------------------------------------------------
# the vector-field network

@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 32
    d_cond: int = 16
    d_key: int = 16
    d_ff: int = 48
    n_blocks: int = 1
    time_dim: int = 16


class VectorFieldModel:
    """Toy conditional velocity network v(z_t, t, C).

    Condition tokens are embedded and linearly projected to the L x d_cond
    matrix C; the backbone injects C through cross-attention in each block,
    so the output matches the input latent shape by construction.
    """

    def __init__(self, latent: LatentSpec, config: ModelConfig, vocab: Sequence[str],
                 params: dict[str, Param]):
        self.latent = latent
        self.config = config
        self.vocab = list(vocab)
        self._vocab_index = {tok: i for i, tok in enumerate(self.vocab)}
        self.params = params

    # -- construction -------------------------------------------------------

    @classmethod
    def create(cls, latent: LatentSpec, captions: Iterable[StructuredCaption],
               config: ModelConfig = ModelConfig(),
               rng: Optional[np.random.Generator] = None) -> "VectorFieldModel":
        rng = rng or np.random.default_rng(0)
        tokens = {UNK_TOKEN}
        for caption in captions:
            tokens.update(serialize_caption(caption).split())
        vocab = sorted(tokens)
        c = config

        def u(rows, cols, fan_in, name):
            return diffcore.init_uniform(rows, cols, fan_in, name, rng)

        params: dict[str, Param] = {}

        def add(p: Param) -> Param:
            params[p.name] = p
            return p

        add(u(len(vocab), c.d_cond, c.d_cond, "cond.embed"))
        add(u(c.d_cond, c.d_cond, c.d_cond, "cond.proj.W"))
        add(u(1, c.d_cond, c.d_cond, "cond.proj.b"))
        add(u(1, c.d_cond, c.d_cond, "cond.null"))
        add(u(c.time_dim, c.d_model, c.time_dim, "time.W"))
        add(u(1, c.d_model, c.time_dim, "time.b"))
        add(u(latent.dim, c.d_model, latent.dim, "in.W"))
        add(u(1, c.d_model, latent.dim, "in.b"))
        for i in range(c.n_blocks):
            pre = f"block{i}."
            add(u(c.d_model, c.d_model, c.d_model, pre + "mix.W"))
            add(u(1, c.d_model, c.d_model, pre + "mix.b"))
            add(u(c.d_model, c.d_key, c.d_model, pre + "attn.Wq"))
            add(u(c.d_cond, c.d_key, c.d_cond, pre + "attn.Wk"))
            add(u(c.d_cond, c.d_model, c.d_cond, pre + "attn.Wv"))
            add(u(c.d_model, c.d_ff, c.d_model, pre + "ff.W1"))
            add(u(1, c.d_ff, c.d_model, pre + "ff.b1"))
            add(u(c.d_ff, c.d_model, c.d_ff, pre + "ff.W2"))
            add(u(1, c.d_model, c.d_ff, pre + "ff.b2"))
        add(u(c.d_model, latent.dim, c.d_model, "out.W"))
        add(u(1, latent.dim, c.d_model, "out.b"))
        return cls(latent, config, vocab, params)

    def parameters(self) -> list[Param]:
        return [self.params[name] for name in sorted(self.params)]

    # -- condition encoding --------------------------------------------------

    def tokenize(self, caption: StructuredCaption) -> list[int]:
        unk = self._vocab_index[UNK_TOKEN]
        return [self._vocab_index.get(tok, unk) for tok in serialize_caption(caption).split()]

    def encode_condition(self, caption: Optional[StructuredCaption], ops=RAW):
        """L x d_cond token matrix, or the learned 1 x d_cond null row."""
        if caption is None:
            return ops.param(self.params["cond.null"])
        emb = ops.embed_rows(self.params["cond.embed"], self.tokenize(caption))
        return diffcore.linear(ops, emb, self.params["cond.proj.W"], self.params["cond.proj.b"])

    # -- velocity field -------------------------------------------------------

    def velocity(self, zt, t: float, cond_matrix, ops=RAW):
        p = self.params
        h = diffcore.linear(ops, zt, p["in.W"], p["in.b"])
        temb = diffcore.linear(ops, time_features(t, self.config.time_dim), p["time.W"], p["time.b"])
        h = ops.add_rowvec(h, temb)
        for i in range(self.config.n_blocks):
            pre = f"block{i}."
            mixed = ops.gelu(diffcore.linear(ops, h, p[pre + "mix.W"], p[pre + "mix.b"]))
            h = ops.add(h, mixed)
            attended = diffcore.cross_attention(
                ops, h, cond_matrix, p[pre + "attn.Wq"], p[pre + "attn.Wk"], p[pre + "attn.Wv"]
            )
            h = ops.add(h, attended)
            ff = diffcore.linear(
                ops,
                ops.gelu(diffcore.linear(ops, h, p[pre + "ff.W1"], p[pre + "ff.b1"])),
                p[pre + "ff.W2"],
                p[pre + "ff.b2"],
            )
            h = ops.add(h, ff)
        return diffcore.linear(ops, h, p["out.W"], p["out.b"])

    # -- persistence ----------------------------------------------------------

    def to_dict(self, optimizer: Optional[AdamW] = None) -> dict:
        doc = diffcore.checkpoint_to_dict(self.parameters(), optimizer)
        doc["model"] = {
            "latent": {
                "dim": self.latent.dim,
                "frames": self.latent.frames,
                "frame_rate_hz": self.latent.frame_rate_hz,
            },
            "config": {
                "d_model": self.config.d_model,
                "d_cond": self.config.d_cond,
                "d_key": self.config.d_key,
                "d_ff": self.config.d_ff,
                "n_blocks": self.config.n_blocks,
                "time_dim": self.config.time_dim,
            },
            "vocab": self.vocab,
        }
        return doc

    @classmethod
    def from_dict(cls, doc: dict) -> "VectorFieldModel":
        params, _ = diffcore.checkpoint_from_dict(doc)
        meta = doc["model"]
        latent = LatentSpec(
            dim=meta["latent"]["dim"],
            frames=meta["latent"]["frames"],
            frame_rate_hz=meta["latent"].get("frame_rate_hz", 25.0),
        )
        return cls(latent, ModelConfig(**meta["config"]), meta["vocab"], params)

    def save(self, path, optimizer: Optional[AdamW] = None) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(optimizer), fh)

    @classmethod
    def load(cls, path) -> "VectorFieldModel":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# loss

Batch = Sequence[tuple[np.ndarray, np.ndarray, float, Optional[StructuredCaption]]]


def _batch_loss(ops, model: VectorFieldModel, batch: Batch):
    total = None
    for z0, z1, t, cond in batch:
        zt = interpolate(z0, z1, t)
        target = fm_target(z0, z1)
        cond_matrix = model.encode_condition(cond, ops)
        pred = model.velocity(zt, t, cond_matrix, ops)
        diff = ops.sub(pred, ops.constant(target))
        total_sq = ops.sum_all(ops.mul(diff, diff))
        total = total_sq if total is None else ops.add(total, total_sq)
    return ops.scalar_mul(total, 1.0 / len(batch))


def fm_loss(model: VectorFieldModel, batch: Batch) -> float:
    """Mean squared velocity-regression error over the batch."""
    if not batch:
        raise ValueError("batch is empty")
    return float(_batch_loss(RAW, model, batch)[0, 0])


def fm_loss_node(tape: Tape, model: VectorFieldModel, batch: Batch):
    """Tape-recorded loss node, for backward passes."""
    if not batch:
        raise ValueError("batch is empty")
    return _batch_loss(tape, model, batch)


# ---------------------------------------------------------------------------
# guidance and sampling

def _combine_cfg(v_cond: np.ndarray, v_uncond: np.ndarray, scale: float) -> np.ndarray:
    return v_uncond + scale * (v_cond - v_uncond)


def cfg_velocity(model: VectorFieldModel, zt, t: float,
                 cond: Optional[StructuredCaption], scale: float) -> np.ndarray:
    """Guided velocity v_u + scale (v_c - v_u).

    scale 1 returns the conditional pass untouched and scale 0 the
    unconditional pass, keeping those endpoints bit-identical to the
    underlying forward evaluations.
    """
    if scale < 0:
        raise ValueError(f"cfg scale must be >= 0, got {scale}")
    if cond is None:
        return model.velocity(zt, t, model.encode_condition(None))
    if scale == 1.0:
        return model.velocity(zt, t, model.encode_condition(cond))
    v_uncond = model.velocity(zt, t, model.encode_condition(None))
    if scale == 0.0:
        return v_uncond
    v_cond = model.velocity(zt, t, model.encode_condition(cond))
    return _combine_cfg(v_cond, v_uncond, scale)


def sample(model: VectorFieldModel, cond: Optional[StructuredCaption],
           cfg: SamplerConfig, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Integrate dz/dt = v(z, t, C) from t=0 noise with uniform Euler steps."""
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    z = rng.standard_normal(model.latent.shape)
    dt = 1.0 / cfg.steps
    cond_matrix = None if cond is None else model.encode_condition(cond)
    null_matrix = model.encode_condition(None)
    scale = cfg.cfg_scale
    for k in range(cfg.steps):
        t = k / cfg.steps
        if cond_matrix is None:
            v = model.velocity(z, t, null_matrix)
        elif scale == 1.0:
            v = model.velocity(z, t, cond_matrix)
        elif scale == 0.0:
            v = model.velocity(z, t, null_matrix)
        else:
            v_cond = model.velocity(z, t, cond_matrix)
            v_uncond = model.velocity(z, t, null_matrix)
            v = _combine_cfg(v_cond, v_uncond, scale)
        z = z + dt * v
        if not np.all(np.isfinite(z)):
            raise NonFiniteStateError(f"non-finite latent at step {k + 1}/{cfg.steps}")
    return z


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 16
    lr: float = 3e-3
    lr_final_fraction: float = 0.1
    weight_decay: float = 1e-4
    view_dropout: float = 0.2
    null_condition_prob: float = 0.1
    model: ModelConfig = field(default_factory=ModelConfig)


def train(task: SyntheticTask, config: TrainConfig = TrainConfig(),
          rng: Optional[np.random.Generator] = None) -> tuple[VectorFieldModel, list[float]]:
    """Fit a fresh vector-field model to the task; returns it with the loss curve.

    One rng drives initialization, batch assembly, view dropout, and the
    null-condition substitution that trains the unconditional branch, so a
    seed fully determines the run.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    model = VectorFieldModel.create(
        task.latent, [c.caption for c in task.conditions], config.model, rng
    )
    optimizer = AdamW(lr=config.lr, weight_decay=config.weight_decay)
    dropout_cfg = AugmentConfig(drop_probability=config.view_dropout)
    params = model.parameters()
    losses: list[float] = []
    n_cond = len(task.conditions)
    floor = config.lr_final_fraction
    for step in range(config.steps):
        # cosine decay from lr down to lr * lr_final_fraction
        optimizer.lr = config.lr * (
            floor + (1.0 - floor) * 0.5 * (1.0 + math.cos(math.pi * step / config.steps))
        )
        batch = []
        for _ in range(config.batch_size):
            spec = task.conditions[int(rng.integers(n_cond))]
            z1 = spec.sample_target(rng)
            z0 = task.fixed_z0 if task.fixed_z0 is not None else rng.standard_normal(task.latent.shape)
            t = float(rng.random())
            cond: Optional[StructuredCaption] = spec.caption
            if config.view_dropout > 0:
                cond = augment_dropout(cond, dropout_cfg, rng)
            if rng.random() < config.null_condition_prob:
                cond = None
            batch.append((z0, z1, t, cond))
        tape = Tape()
        loss = fm_loss_node(tape, model, batch)
        loss_value = float(loss.value[0, 0])
        if not math.isfinite(loss_value):
            raise DivergedLossError(f"loss became {loss_value} at step {len(losses)}")
        diffcore.zero_grads(params)
        tape.backward(loss)
        optimizer.step(params)
        losses.append(loss_value)
    return model, losses


def evaluate_conditional_fit(model: VectorFieldModel, task: SyntheticTask,
                             n_samples: int, cfg: SamplerConfig,
                             rng: Optional[np.random.Generator] = None) -> list[dict]:
    """Empirical per-condition sample statistics against the task targets."""
    if n_samples < 100:
        raise ValueError(f"n_samples must be >= 100, got {n_samples}")
    rng = rng if rng is not None else np.random.default_rng(cfg.rng_seed)
    results = []
    for spec in task.conditions:
        draws = np.stack([sample(model, spec.caption, cfg, rng) for _ in range(n_samples)])
        flat = draws.reshape(n_samples, -1)
        mean = flat.mean(axis=0)
        centered = flat - mean
        cov_trace = float((centered**2).sum() / (n_samples - 1))
        target = spec.mean.flatten()
        results.append(
            {
                "caption": serialize_caption(spec.caption),
                "target_mean": target,
                "sample_mean": mean,
                "mean_distance": float(np.linalg.norm(mean - target)),
                "sample_cov_trace": cov_trace,
                "target_cov_trace": float(spec.sigma**2 * task.latent.dim * task.latent.frames),
            }
        )
    return results
