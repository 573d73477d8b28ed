"""Pixel-space conditional denoising diffusion: schedule, model, training, DDIM.

The denoiser is a small U-Net whose conditioning enters through per-block
scale-and-shift on group-normalized activations. Every dense/projection map
has a stable hierarchical parameter name so low-rank adapters can target it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field

import numpy as np

from . import nn
from .util import canonical_json, digest_text
from .tensorfile import write_tensors, read_tensors, TensorFileError


class DiffusionError(ValueError):
    pass


DEFAULT_T = 200
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.05


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray

    def alpha_bar(self, t: int | np.ndarray) -> float | np.ndarray:
        """Cumulative signal coefficient; t is 1-based, alpha_bar(0) == 1."""
        t = np.asarray(t)
        if np.any(t < 0) or np.any(t > self.T):
            raise DiffusionError(f"timestep out of range [0, {self.T}]: {t}")
        padded = np.concatenate([[1.0], self.alpha_bars])
        out = padded[t]
        return float(out) if out.ndim == 0 else out


def make_schedule(T: int = DEFAULT_T, beta_min: float = DEFAULT_BETA_MIN,
                  beta_max: float = DEFAULT_BETA_MAX) -> NoiseSchedule:
    """Linear beta schedule with cumulative products in float64."""
    if T < 2:
        raise DiffusionError(f"T must be >= 2, got {T}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise DiffusionError(f"need 0 < beta_min <= beta_max < 1, got ({beta_min}, {beta_max})")
    betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    return NoiseSchedule(T=T, betas=betas, alphas=alphas, alpha_bars=alpha_bars)


def forward_diffuse(x0: np.ndarray, t: int | np.ndarray, eps: np.ndarray,
                    schedule: NoiseSchedule) -> np.ndarray:
    """Noise clean data to timestep t: sqrt(ab_t) x0 + sqrt(1 - ab_t) eps."""
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    if eps.shape != x0.shape:
        raise DiffusionError(f"eps shape {eps.shape} does not match x0 shape {x0.shape}")
    ab = schedule.alpha_bar(t)
    if np.ndim(ab):
        extra = x0.ndim - 1
        ab = np.asarray(ab).reshape((-1,) + (1,) * extra)
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


# ---------------------------------------------------------------------------
# Conditional U-Net denoiser


@dataclass(frozen=True)
class DenoiserArch:
    """Architecture descriptor; embedded in checkpoints and compared on load."""

    image_size: int = 64
    in_channels: int = 1
    base_channels: int = 16
    channel_mults: tuple[int, ...] = (1, 2)
    cond_dim: int = 32
    emb_dim: int = 48
    groups: int = 8
    dtype: str = "float32"

    def to_meta(self) -> dict:
        d = asdict(self)
        d["channel_mults"] = list(self.channel_mults)
        return d

    @classmethod
    def from_meta(cls, meta: dict) -> "DenoiserArch":
        meta = dict(meta)
        meta["channel_mults"] = tuple(meta["channel_mults"])
        return cls(**meta)


class _ResBlock:
    """conv-GN-FiLM-SiLU-conv-GN-SiLU with a residual shortcut."""

    def __init__(self, store, name, c_in, c_out, emb_dim, groups, rng):
        self.name = name
        self.conv1 = nn.Conv2d(store, f"{name}.conv1", c_in, c_out, rng)
        self.norm1 = nn.GroupNorm(store, f"{name}.norm1", min(groups, c_out), c_out)
        self.film = nn.Linear(store, f"{name}.film", emb_dim, 2 * c_out, rng, init_scale=0.1)
        self.act1 = nn.SiLU(f"{name}.act1")
        self.conv2 = nn.Conv2d(store, f"{name}.conv2", c_out, c_out, rng)
        self.norm2 = nn.GroupNorm(store, f"{name}.norm2", min(groups, c_out), c_out)
        self.act2 = nn.SiLU(f"{name}.act2")
        self.skip = None
        if c_in != c_out:
            self.skip = nn.Conv2d(store, f"{name}.skip", c_in, c_out, rng, k=1, pad=0)
        self.c_out = c_out

    def forward(self, x, emb, cache):
        h = self.conv1.forward(x, cache)
        h = self.norm1.forward(h, cache)
        sb = self.film.forward(emb, cache)
        s, b = sb[:, : self.c_out], sb[:, self.c_out :]
        if cache is not None:
            cache[f"{self.name}.film_app"] = (h, s)
        h = h * (1.0 + s[:, :, None, None]) + b[:, :, None, None]
        h = self.act1.forward(h, cache)
        h = self.conv2.forward(h, cache)
        h = self.norm2.forward(h, cache)
        h = self.act2.forward(h, cache)
        return h + (self.skip.forward(x, cache) if self.skip else x)

    def backward(self, dy, cache, grads):
        dh = self.act2.backward(dy, cache, grads)
        dh = self.norm2.backward(dh, cache, grads)
        dh = self.conv2.backward(dh, cache, grads)
        dh = self.act1.backward(dh, cache, grads)
        h2, s = cache[f"{self.name}.film_app"]
        ds = (dh * h2).sum(axis=(2, 3))
        db = dh.sum(axis=(2, 3))
        demb = self.film.backward(np.concatenate([ds, db], axis=1), cache, grads)
        dh = dh * (1.0 + s[:, :, None, None])
        dh = self.norm1.backward(dh, cache, grads)
        dx = self.conv1.backward(dh, cache, grads)
        dx += self.skip.backward(dy, cache, grads) if self.skip else dy
        return dx, demb


class _PositionwiseDense:
    """Residual channel-mixing dense map applied at every spatial position."""

    def __init__(self, store, name, channels, rng):
        self.name = name
        self.lin = nn.Linear(store, name, channels, channels, rng)
        self.channels = channels

    def forward(self, x, cache):
        n, c, h, w = x.shape
        flat = np.ascontiguousarray(x.transpose(0, 2, 3, 1)).reshape(-1, c)
        y = self.lin.forward(flat, cache)
        if cache is not None:
            cache[f"{self.name}.shape"] = (n, c, h, w)
        return x + y.reshape(n, h, w, c).transpose(0, 3, 1, 2)

    def backward(self, dy, cache, grads):
        n, c, h, w = cache[f"{self.name}.shape"]
        flat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(-1, c)
        dx = self.lin.backward(flat, cache, grads)
        return dy + dx.reshape(n, h, w, c).transpose(0, 3, 1, 2)


class ConditionalDenoiser:
    """epsilon-predictor: forward(x_t, t, cond) -> tensor shaped like x_t."""

    def __init__(self, arch: DenoiserArch = DenoiserArch(), seed: int = 0):
        self.arch = arch
        self.store = nn.ParamStore(dtype=arch.dtype)
        rng = np.random.default_rng(seed)
        chans = [arch.base_channels * m for m in arch.channel_mults]
        levels = len(chans)
        e = arch.emb_dim
        self.time_fc1 = nn.Linear(self.store, "time_fc1", e, e, rng)
        self.time_act = nn.SiLU("time_act")
        self.time_fc2 = nn.Linear(self.store, "time_fc2", e, e, rng)
        self.cond_proj = nn.Linear(self.store, "cond_proj", arch.cond_dim, e, rng)
        self.stem = nn.Conv2d(self.store, "stem", arch.in_channels, chans[0], rng)
        self.down_res = []
        self.down_pool = []
        for i in range(levels):
            self.down_res.append(
                _ResBlock(self.store, f"down{i}.res", chans[i], chans[i], e, arch.groups, rng)
            )
            if i < levels - 1:
                self.down_pool.append(
                    nn.Conv2d(self.store, f"down{i}.pool", chans[i], chans[i + 1], rng, stride=2)
                )
        self.mid_res1 = _ResBlock(self.store, "mid.res1", chans[-1], chans[-1], e, arch.groups, rng)
        self.mid_dense = _PositionwiseDense(self.store, "mid.dense", chans[-1], rng)
        self.mid_res2 = _ResBlock(self.store, "mid.res2", chans[-1], chans[-1], e, arch.groups, rng)
        self.up_conv = []
        self.up_res = []
        for i in reversed(range(levels - 1)):
            self.up_conv.append(nn.Conv2d(self.store, f"up{i}.conv", chans[i + 1], chans[i], rng))
            self.up_res.append(
                _ResBlock(self.store, f"up{i}.res", 2 * chans[i], chans[i], e, arch.groups, rng)
            )
        self.head_norm = nn.GroupNorm(self.store, "head.norm", min(arch.groups, chans[0]), chans[0])
        self.head_act = nn.SiLU("head.act")
        self.head_conv = nn.Conv2d(self.store, "head.conv", chans[0], arch.in_channels, rng,
                                   init_scale=0.1)
        self.levels = levels

    @property
    def image_size(self) -> int:
        return self.arch.image_size

    def _prepare(self, x, t, cond):
        dtype = self.store.dtype
        x = np.asarray(x, dtype=dtype)
        if x.ndim == 2:
            x = x[None, None]
        elif x.ndim == 3:
            x = x[:, None]
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t, dtype=np.float64).reshape(-1), (n,))
        cond = np.asarray(cond, dtype=dtype)
        if cond.ndim == 1:
            cond = np.broadcast_to(cond, (n, cond.shape[0]))
        return x, t, np.ascontiguousarray(cond)

    def _embed(self, t, cond, cache):
        sin = nn.sinusoidal_embedding(t, self.arch.emb_dim, dtype=self.store.dtype)
        h = self.time_fc1.forward(sin, cache)
        h = self.time_act.forward(h, cache)
        temb = self.time_fc2.forward(h, cache)
        cemb = self.cond_proj.forward(cond, cache)
        return temb + cemb

    def forward(self, x, t, cond):
        out, _ = self._run(x, t, cond, cache=None)
        return out

    def forward_train(self, x, t, cond):
        cache: dict = {}
        out, _ = self._run(x, t, cond, cache)
        return out, cache

    def _run(self, x, t, cond, cache):
        x, t, cond = self._prepare(x, t, cond)
        emb = self._embed(t, cond, cache)
        h = self.stem.forward(x, cache)
        skips = []
        for i in range(self.levels):
            h = self.down_res[i].forward(h, emb, cache)
            if i < self.levels - 1:
                skips.append(h)
                h = self.down_pool[i].forward(h, cache)
        h = self.mid_res1.forward(h, emb, cache)
        h = self.mid_dense.forward(h, cache)
        h = self.mid_res2.forward(h, emb, cache)
        for j, i in enumerate(reversed(range(self.levels - 1))):
            h = nn.upsample_nearest2(h)
            h = self.up_conv[j].forward(h, cache)
            h = np.concatenate([h, skips[i]], axis=1)
            h = self.up_res[j].forward(h, emb, cache)
        h = self.head_norm.forward(h, cache)
        h = self.head_act.forward(h, cache)
        out = self.head_conv.forward(h, cache)
        return out, emb

    def backward(self, dout, cache):
        """Gradients of a scalar loss w.r.t. parameters and (x, cond) inputs."""
        grads: dict[str, np.ndarray] = {}
        dh = self.head_conv.backward(np.asarray(dout, dtype=self.store.dtype), cache, grads)
        dh = self.head_act.backward(dh, cache, grads)
        dh = self.head_norm.backward(dh, cache, grads)
        demb = 0.0
        dskips = {}
        chans = [self.arch.base_channels * m for m in self.arch.channel_mults]
        # walk the up path in reverse of forward order
        for j in range(len(self.up_res) - 1, -1, -1):
            i = self.levels - 2 - j
            dh, de = self.up_res[j].backward(dh, cache, grads)
            demb = demb + de
            c_up = chans[i]
            dskips[i] = dh[:, c_up:]
            dh = self.up_conv[j].backward(np.ascontiguousarray(dh[:, :c_up]), cache, grads)
            dh = nn.upsample_nearest2_backward(dh)
        dh, de = self.mid_res2.backward(dh, cache, grads)
        demb = demb + de
        dh = self.mid_dense.backward(dh, cache, grads)
        dh, de = self.mid_res1.backward(dh, cache, grads)
        demb = demb + de
        for i in range(self.levels - 1, -1, -1):
            if i < self.levels - 1:
                dh = self.down_pool[i].backward(dh, cache, grads)
                dh = dh + dskips[i]
            dh, de = self.down_res[i].backward(dh, cache, grads)
            demb = demb + de
        dx = self.stem.backward(dh, cache, grads)
        dcond = self.cond_proj.backward(demb, cache, grads)
        dt = self.time_fc2.backward(demb, cache, grads)
        dt = self.time_act.backward(dt, cache, grads)
        self.time_fc1.backward(dt, cache, grads)
        return grads, dx, dcond


# ---------------------------------------------------------------------------
# Training


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 16
    epochs: int = 30
    seed: int = 0
    trainable_selector: object = None  # predicate over parameter names; None = all

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise DiffusionError("learning_rate must be positive")
        if self.batch_size < 1:
            raise DiffusionError("batch_size must be >= 1")
        if self.epochs < 0:
            raise DiffusionError("epochs must be >= 0")

    def digest(self) -> str:
        sel = self.trainable_selector
        sel_name = "all" if sel is None else getattr(sel, "__name__", "custom")
        return digest_text(
            canonical_json(
                {
                    "learning_rate": self.learning_rate,
                    "batch_size": self.batch_size,
                    "epochs": self.epochs,
                    "seed": self.seed,
                    "selector": sel_name,
                }
            )
        )


def denoising_loss_and_grads(model, images, conds, schedule, rng_seed):
    """MSE between true and predicted noise, with parameter and cond grads.

    The seeded draw order is part of the contract: per-item timesteps first
    (integers in [1, T]), then the noise tensor (standard normal, float64).
    Returns (loss, grads, dconds).
    """
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    n = images.shape[0]
    if n == 0:
        raise DiffusionError("empty batch")
    rng = np.random.default_rng(rng_seed)
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal(images.shape)
    x_t = forward_diffuse(images, t, eps, schedule)
    pred, cache = model.forward_train(x_t, t, conds)
    diff = np.asarray(pred, dtype=np.float64) - eps
    loss = float(np.mean(diff * diff))
    dpred = (2.0 / diff.size) * diff
    grads, _, dconds = model.backward(dpred, cache)
    return loss, grads, dconds


def denoising_loss(model, images, conds, schedule, rng_seed, trainable_selector=None):
    """Standard noise-prediction objective; gradients only for selected params."""
    loss, grads, _ = denoising_loss_and_grads(model, images, conds, schedule, rng_seed)
    if trainable_selector is not None:
        grads = {k: v for k, v in grads.items() if trainable_selector(k)}
    return loss, grads


@dataclass
class Checkpoint:
    arch: DenoiserArch
    schedule_params: dict
    params: dict[str, np.ndarray]
    adapters: list[dict] = field(default_factory=list)
    config_digest: str = ""
    epoch_losses: list[float] = field(default_factory=list)

    FORMAT = "denoiser-checkpoint"

    def save(self, path) -> None:
        meta = {
            "arch": self.arch.to_meta(),
            "schedule": self.schedule_params,
            "adapters": self.adapters,
            "config_digest": self.config_digest,
            "epoch_losses": self.epoch_losses,
        }
        write_tensors(path, self.FORMAT, meta, self.params)

    @classmethod
    def load(cls, path) -> "Checkpoint":
        meta, tensors = read_tensors(path, expect_kind=cls.FORMAT)
        return cls(
            arch=DenoiserArch.from_meta(meta["arch"]),
            schedule_params=meta["schedule"],
            params=tensors,
            adapters=meta["adapters"],
            config_digest=meta["config_digest"],
            epoch_losses=list(meta["epoch_losses"]),
        )

    @classmethod
    def from_model(cls, model: ConditionalDenoiser, schedule: NoiseSchedule,
                   config_digest: str = "", epoch_losses: list[float] | None = None) -> "Checkpoint":
        adapters = [
            {"target": t, "rank": ad["rank"], "alpha": ad["alpha"]}
            for t, ad in model.store.adapters.items()
        ]
        return cls(
            arch=model.arch,
            schedule_params={
                "T": schedule.T,
                "beta_min": float(schedule.betas[0]),
                "beta_max": float(schedule.betas[-1]),
            },
            params=model.store.copy_values(),
            adapters=adapters,
            config_digest=config_digest,
            epoch_losses=list(epoch_losses or []),
        )

    def schedule(self) -> NoiseSchedule:
        sp = self.schedule_params
        return make_schedule(sp["T"], sp["beta_min"], sp["beta_max"])

    def build_model(self) -> ConditionalDenoiser:
        model = ConditionalDenoiser(self.arch, seed=0)
        self.load_into(model)
        return model

    def load_into(self, model: ConditionalDenoiser) -> None:
        if model.arch != self.arch:
            raise TensorFileError(
                f"architecture mismatch: checkpoint {self.arch} vs model {model.arch}"
            )
        for ad in self.adapters:
            if ad["target"] not in model.store.adapters:
                model.store.attach_adapter(
                    ad["target"],
                    A=self.params[f"{ad['target']}::lora_A"],
                    B=self.params[f"{ad['target']}::lora_B"],
                    rank=ad["rank"],
                    alpha=ad["alpha"],
                )
        for name, value in self.params.items():
            model.store.set(name, value)


def train_diffusion(model, manifest, encoder, schedule: NoiseSchedule,
                    config: TrainConfig) -> Checkpoint:
    """Adam on the denoising objective over the manifest's train split.

    Only parameters passing ``config.trainable_selector`` are updated; all
    other tensors stay bit-identical. Deterministic for a fixed seed.
    """
    train = manifest.subset("train")
    if not train:
        raise DiffusionError("manifest has no train split")
    prompts = sorted({s.prompt for s in train})
    conds = {p: encoder.encode(p) for p in prompts}  # fails fast on unknown tokens
    dtype = model.store.dtype
    images = np.stack([manifest.load_image(s) for s in train]).astype(dtype)[:, None]
    cond_mat = np.stack([conds[s.prompt] for s in train]).astype(dtype)
    n = images.shape[0]
    rng = np.random.default_rng(config.seed)
    opt = nn.Adam(model.store, config.learning_rate, selector=config.trainable_selector)
    batches = max(n // config.batch_size, 1)
    bs = min(config.batch_size, n)
    epoch_losses = []
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        total = 0.0
        for b in range(batches):
            idx = perm[b * bs : (b + 1) * bs]
            step_seed = int(rng.integers(0, 2**63))
            loss, grads = denoising_loss(
                model, images[idx], cond_mat[idx], schedule, step_seed,
                trainable_selector=config.trainable_selector,
            )
            opt.step(grads)
            total += loss
        epoch_losses.append(total / batches)
    return Checkpoint.from_model(model, schedule, config.digest(), epoch_losses)


# ---------------------------------------------------------------------------
# DDIM sampling (eta = 0)


def tau_sequence(T: int, steps: int) -> list[int]:
    """Uniformly strided sub-sequence of timesteps ending at T."""
    if not 1 <= steps <= T:
        raise DiffusionError(f"steps must be in [1, T={T}], got {steps}")
    return [(i * T) // steps for i in range(1, steps + 1)]


def _predict_eps(model, x, t, conds, guidance):
    eps_c = np.asarray(model.forward(x, t, conds), dtype=np.float64)
    if guidance == 1.0:
        return eps_c
    uncond = np.zeros_like(conds)
    eps_u = np.asarray(model.forward(x, t, uncond), dtype=np.float64)
    return eps_u + guidance * (eps_c - eps_u)


def ddim_reverse(model, x, conds, schedule, taus, guidance=1.0):
    """Deterministic DDIM updates over ``taus`` (ascending) down to t=0."""
    x = np.asarray(x, dtype=np.float64)
    for i in range(len(taus) - 1, -1, -1):
        t = taus[i]
        ab_t = schedule.alpha_bar(t)
        ab_prev = schedule.alpha_bar(taus[i - 1]) if i > 0 else 1.0
        eps = _predict_eps(model, x, t, conds, guidance)
        x0 = (x - math.sqrt(1.0 - ab_t) * eps) / math.sqrt(ab_t)
        x = math.sqrt(ab_prev) * x0 + math.sqrt(1.0 - ab_prev) * eps
    return x


def text2img_sample(model, cond, schedule: NoiseSchedule, steps: int, seed: int,
                    guidance: float = 1.0) -> np.ndarray:
    """Generate one image from seeded noise; output clamped to [-1, 1]."""
    taus = tau_sequence(schedule.T, steps)
    size = model.image_size
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((1, 1, size, size))
    cond = np.asarray(cond, dtype=np.float64).reshape(1, -1)
    x = ddim_reverse(model, x, cond, schedule, taus, guidance)
    return np.clip(x[0, 0], -1.0, 1.0)


def text2img_batch(model, conds: np.ndarray, schedule: NoiseSchedule, steps: int,
                   seeds: list[int], guidance: float = 1.0) -> np.ndarray:
    """Batched text2img with per-image seeds.

    Bitwise equivalent to calling text2img_sample once per (cond, seed):
    every per-sample reduction in the model is independent of batch
    composition (property-tested).
    """
    taus = tau_sequence(schedule.T, steps)
    size = model.image_size
    x = np.stack([np.random.default_rng(s).standard_normal((1, size, size)) for s in seeds])
    conds = np.asarray(conds, dtype=np.float64)
    x = ddim_reverse(model, x, conds, schedule, taus, guidance)
    return np.clip(x[:, 0], -1.0, 1.0)


def img2img_batch(model, sources: np.ndarray, conds: np.ndarray, schedule: NoiseSchedule,
                  strength: float, steps: int, seeds: list[int],
                  guidance: float = 1.0) -> np.ndarray:
    """Batched img2img refinement with per-image noise seeds."""
    if not 0.0 <= strength <= 1.0:
        raise DiffusionError(f"strength must be in [0, 1], got {strength}")
    sources = np.asarray(sources, dtype=np.float64)
    t_star = int(round(strength * schedule.T))
    if t_star == 0:
        return sources.copy()
    if strength == 1.0:
        return text2img_batch(model, conds, schedule, steps, seeds, guidance)
    size = model.image_size
    eps = np.stack([np.random.default_rng(s).standard_normal((size, size)) for s in seeds])
    x = forward_diffuse(sources, t_star, np.asarray(eps), schedule)[:, None]
    taus = [t for t in tau_sequence(schedule.T, steps) if t < t_star] + [t_star]
    conds = np.asarray(conds, dtype=np.float64)
    x = ddim_reverse(model, x, conds, schedule, taus, guidance)
    return np.clip(x[:, 0], -1.0, 1.0)


def img2img_sample(model, source: np.ndarray, cond, schedule: NoiseSchedule,
                   strength: float, steps: int, seed: int,
                   guidance: float = 1.0) -> np.ndarray:
    """Refine ``source`` by noising to t* = round(strength * T) and reversing.

    strength 0 returns the source unchanged; strength 1 is exactly
    text2img_sample with the same seed (the source is ignored).
    """
    if not 0.0 <= strength <= 1.0:
        raise DiffusionError(f"strength must be in [0, 1], got {strength}")
    source = np.asarray(source, dtype=np.float64)
    if source.shape != (model.image_size, model.image_size):
        raise DiffusionError(
            f"source shape {source.shape} does not match model size {model.image_size}"
        )
    t_star = int(round(strength * schedule.T))
    if t_star == 0:
        return source.copy()
    if strength == 1.0:
        return text2img_sample(model, cond, schedule, steps, seed, guidance)
    rng = np.random.default_rng(seed)
    eps = rng.standard_normal(source.shape)
    x = forward_diffuse(source, t_star, eps, schedule)[None, None]
    taus = [t for t in tau_sequence(schedule.T, steps) if t < t_star] + [t_star]
    cond = np.asarray(cond, dtype=np.float64).reshape(1, -1)
    x = ddim_reverse(model, x, cond, schedule, taus, guidance)
    return np.clip(x[0, 0], -1.0, 1.0)
