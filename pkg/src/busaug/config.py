"""Flat key-value experiment configuration with a strict schema.

Files hold ``key = value`` lines with ``#`` comments; dotted keys group the
sections (data.*, diffusion.*, lora.*, ti.*, generate.*, classifier.*,
eval.*). Unknown keys are fatal rather than silently ignored, and every
value is validated against the constraint documented here.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Callable

from .data import PhantomConfig, DEFAULT_TI_TOKEN
from .diffusion import TrainConfig
from .adapters import TextualInversionConfig
from .pipeline import ExperimentSettings
from .util import derive_seed


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class _Key:
    type: str  # int | float | str | ints | choice:<a|b|...>
    default: object
    constraint: str = ""
    check: Callable[[object], bool] | None = None


SCHEMA: dict[str, _Key] = {
    "seed": _Key("int", 42, ">= 0", lambda v: v >= 0),
    "data.source": _Key("choice:phantom|busi", "phantom"),
    "data.busi_root": _Key("str", ""),
    "data.image_size": _Key("int", 64, ">= 16", lambda v: v >= 16),
    "data.train_fraction": _Key("float", 0.8, "in (0, 1)", lambda v: 0.0 < v < 1.0),
    "data.phantom_benign": _Key("int", 100, ">= 0", lambda v: v >= 0),
    "data.phantom_malignant": _Key("int", 100, ">= 0", lambda v: v >= 0),
    "data.phantom_normal": _Key("int", 100, ">= 0", lambda v: v >= 0),
    "data.speckle_scale": _Key("float", 1.0, "> 0", lambda v: v > 0),
    "data.lesion_intensity": _Key("float", 0.32, "in [0, 1]", lambda v: 0.0 <= v <= 1.0),
    "diffusion.timesteps": _Key("int", 200, ">= 2", lambda v: v >= 2),
    "diffusion.beta_min": _Key("float", 1e-4, "in (0, 1)", lambda v: 0.0 < v < 1.0),
    "diffusion.beta_max": _Key("float", 0.05, "in (0, 1)", lambda v: 0.0 < v < 1.0),
    "diffusion.base_channels": _Key("int", 16, ">= 2", lambda v: v >= 2),
    "diffusion.channel_mults": _Key("ints", (1, 2), "non-empty positive ints",
                                    lambda v: len(v) > 0 and all(m >= 1 for m in v)),
    "diffusion.cond_dim": _Key("int", 32, ">= 2", lambda v: v >= 2),
    "diffusion.emb_dim": _Key("int", 48, "even, >= 4", lambda v: v >= 4 and v % 2 == 0),
    "diffusion.epochs": _Key("int", 30, ">= 0", lambda v: v >= 0),
    "diffusion.batch_size": _Key("int", 16, ">= 1", lambda v: v >= 1),
    "diffusion.learning_rate": _Key("float", 1e-4, "> 0", lambda v: v > 0),
    "lora.rank": _Key("int", 4, ">= 1", lambda v: v >= 1),
    "lora.alpha": _Key("float", 4.0, "> 0", lambda v: v > 0),
    "lora.epochs": _Key("int", 10, ">= 0", lambda v: v >= 0),
    "lora.batch_size": _Key("int", 16, ">= 1", lambda v: v >= 1),
    "lora.learning_rate": _Key("float", 1e-4, "> 0", lambda v: v > 0),
    "ti.steps": _Key("int", 500, ">= 0", lambda v: v >= 0),
    "ti.learning_rate": _Key("float", 5e-3, "> 0", lambda v: v > 0),
    "ti.batch_size": _Key("int", 4, ">= 1", lambda v: v >= 1),
    "ti.token": _Key("str", DEFAULT_TI_TOKEN, "non-empty", lambda v: len(v) > 0),
    "ti.init_word": _Key("str", "image", "non-empty", lambda v: len(v) > 0),
    "ti.n_vec": _Key("int", 1, ">= 1", lambda v: v >= 1),
    "generate.steps": _Key("int", 50, ">= 1", lambda v: v >= 1),
    "generate.strength": _Key("float", 0.3, "in [0, 1]", lambda v: 0.0 <= v <= 1.0),
    "generate.guidance": _Key("float", 1.0, ">= 0", lambda v: v >= 0),
    "generate.batch_size": _Key("int", 16, ">= 1", lambda v: v >= 1),
    "generate.target_per_class": _Key("int", 0, ">= 0 (0 = match majority class)",
                                      lambda v: v >= 0),
    "classifier.epochs": _Key("int", 30, ">= 0", lambda v: v >= 0),
    "classifier.batch_size": _Key("int", 16, ">= 1", lambda v: v >= 1),
    "classifier.learning_rate": _Key("float", 1e-4, "> 0", lambda v: v > 0),
    "classifier.base_channels": _Key("int", 12, ">= 2", lambda v: v >= 2),
    "eval.feature_dim": _Key("int", 64, "even, >= 2", lambda v: v >= 2 and v % 2 == 0),
    "eval.encoder_embed_dim": _Key("int", 16, ">= 2", lambda v: v >= 2),
}


def _parse_value(key: str, spec: _Key, raw: str):
    raw = raw.strip()
    try:
        if spec.type == "int":
            return int(raw)
        if spec.type == "float":
            return float(raw)
        if spec.type == "ints":
            return tuple(int(part) for part in raw.split(",") if part.strip())
        if spec.type.startswith("choice:"):
            choices = spec.type.split(":", 1)[1].split("|")
            if raw not in choices:
                raise ConfigError(f"config key {key!r}: value {raw!r} not one of {choices}")
            return raw
        return raw
    except ConfigError:
        raise
    except ValueError:
        raise ConfigError(f"config key {key!r}: cannot parse {raw!r} as {spec.type}") from None


def _validate(key: str, spec: _Key, value) -> None:
    if spec.check is not None and not spec.check(value):
        raise ConfigError(f"config key {key!r}: value {value!r} violates constraint "
                          f"({spec.constraint})")


def default_config() -> dict:
    return {key: spec.default for key, spec in SCHEMA.items()}


def parse_config(path: str | Path | None) -> dict:
    """Parse and validate a config file; missing keys take documented defaults."""
    values = default_config()
    if path is None:
        return values
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {line!r}")
        key, raw = (part.strip() for part in stripped.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
        spec = SCHEMA[key]
        value = _parse_value(key, spec, raw)
        _validate(key, spec, value)
        values[key] = value
    return values


def render_config(values: dict) -> str:
    """Echo a validated config as sorted 'key = value' lines (round-trips)."""
    lines = []
    for key in sorted(values):
        v = values[key]
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        lines.append(f"{key} = {v}")
    return "\n".join(lines) + "\n"


def echo_config(values: dict, out_dir: str | Path) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "config.echo"
    path.write_text(render_config(values), encoding="utf-8")
    return path


def build_settings(values: dict) -> ExperimentSettings:
    """Assemble pipeline settings from a validated config mapping."""
    target = values["generate.target_per_class"]
    return ExperimentSettings(
        seed=values["seed"],
        image_size=values["data.image_size"],
        denoiser_channels=values["diffusion.base_channels"],
        denoiser_mults=tuple(values["diffusion.channel_mults"]),
        cond_dim=values["diffusion.cond_dim"],
        emb_dim=values["diffusion.emb_dim"],
        timesteps=values["diffusion.timesteps"],
        beta_min=values["diffusion.beta_min"],
        beta_max=values["diffusion.beta_max"],
        base_train=TrainConfig(
            learning_rate=values["diffusion.learning_rate"],
            batch_size=values["diffusion.batch_size"],
            epochs=values["diffusion.epochs"],
        ),
        lora_rank=values["lora.rank"],
        lora_alpha=values["lora.alpha"],
        lora_train=TrainConfig(
            learning_rate=values["lora.learning_rate"],
            batch_size=values["lora.batch_size"],
            epochs=values["lora.epochs"],
        ),
        ti_token=values["ti.token"],
        ti_init=values["ti.init_word"],
        ti_n_vec=values["ti.n_vec"],
        ti_config=TextualInversionConfig(
            steps=values["ti.steps"],
            learning_rate=values["ti.learning_rate"],
            batch_size=values["ti.batch_size"],
        ),
        sampler_steps=values["generate.steps"],
        strength=values["generate.strength"],
        guidance=values["generate.guidance"],
        generation_batch=values["generate.batch_size"],
        target_per_class=None if target == 0 else target,
        classifier_train=TrainConfig(
            learning_rate=values["classifier.learning_rate"],
            batch_size=values["classifier.batch_size"],
            epochs=values["classifier.epochs"],
        ),
        classifier_channels=values["classifier.base_channels"],
        feature_dim=values["eval.feature_dim"],
        encoder_embed_dim=values["eval.encoder_embed_dim"],
    )


def build_phantom_config(values: dict) -> PhantomConfig:
    return PhantomConfig(
        image_size=values["data.image_size"],
        speckle_scale=values["data.speckle_scale"],
        lesion_intensity=values["data.lesion_intensity"],
        seed=derive_seed(values["seed"], "phantom"),
    )


def phantom_counts(values: dict) -> dict:
    from .data import ClassLabel

    return {
        ClassLabel.BENIGN: values["data.phantom_benign"],
        ClassLabel.MALIGNANT: values["data.phantom_malignant"],
        ClassLabel.NORMAL: values["data.phantom_normal"],
    }
