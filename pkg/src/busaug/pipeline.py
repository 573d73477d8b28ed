"""Three-stage workflow orchestration: hybrid generation, balancing, arms.

The experiment runner mirrors the study design: a classifier trained on the
original images is the baseline; the other four arms augment the training
split with synthetic images generated by text2img, optionally refined by
img2img and/or conditioned through a learned token.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .adapters import (
    PromptEncoder,
    TextualInversionConfig,
    attach_lora,
    default_lora_targets,
    merge_lora,
    register_token,
    save_adapters,
    train_textual_inversion,
)
from .data import (
    DEFAULT_TI_TOKEN,
    LABELS,
    ClassLabel,
    Manifest,
    Sample,
    balance_plan,
    prompt_for_label,
    save_image,
)
from .diffusion import (
    Checkpoint,
    ConditionalDenoiser,
    DenoiserArch,
    NoiseSchedule,
    TrainConfig,
    img2img_batch,
    make_schedule,
    text2img_batch,
    train_diffusion,
)
from .evaluation import (
    ClassifierArch,
    MetricsReport,
    RandomConvFeatures,
    compute_metrics,
    evaluate_split,
    extract_features,
    fid,
    fid_stats,
    train_classifier,
)
from .util import canonical_json, derive_seed, digest_text


class PipelineError(RuntimeError):
    pass


class ExperimentArm(str, Enum):
    BASELINE = "baseline"
    SD = "sd"
    SD_IMG2IMG = "sd_img2img"
    SD_TI = "sd_ti"
    SD_TI_IMG2IMG = "sd_ti_img2img"

    @classmethod
    def parse(cls, value: str) -> "ExperimentArm":
        try:
            return cls(value)
        except ValueError:
            raise PipelineError(
                f"unknown arm {value!r}; expected one of {[m.value for m in cls]}"
            ) from None

    @property
    def use_ti(self) -> bool:
        return self in (ExperimentArm.SD_TI, ExperimentArm.SD_TI_IMG2IMG)

    @property
    def use_img2img(self) -> bool:
        return self in (ExperimentArm.SD_IMG2IMG, ExperimentArm.SD_TI_IMG2IMG)


ARM_ORDER: tuple[ExperimentArm, ...] = (
    ExperimentArm.BASELINE,
    ExperimentArm.SD,
    ExperimentArm.SD_IMG2IMG,
    ExperimentArm.SD_TI,
    ExperimentArm.SD_TI_IMG2IMG,
)


@dataclass
class GenerationConfig:
    use_ti: bool = False
    use_img2img: bool = False
    strength: float = 0.3
    sampler_steps: int = 50
    guidance: float = 1.0
    seed_base: int = 0
    ti_token: str = DEFAULT_TI_TOKEN
    batch_size: int = 16

    def __post_init__(self):
        if not 0.0 <= self.strength <= 1.0:
            raise PipelineError(f"strength must be in [0, 1], got {self.strength}")
        if self.sampler_steps < 1:
            raise PipelineError("sampler_steps must be >= 1")
        if self.batch_size < 1:
            raise PipelineError("batch_size must be >= 1")


def hybrid_generate(model, encoder, label: ClassLabel, count: int,
                    config: GenerationConfig, schedule: NoiseSchedule
                    ) -> tuple[list[np.ndarray], list[dict]]:
    """text2img per seed, optionally refined by img2img with the same prompt.

    Image i uses seed ``seed_base + i``; the img2img noise seed derives from
    it, so each record regenerates its image exactly.
    """
    label = ClassLabel.parse(label)
    prompt = prompt_for_label(label, config.use_ti, config.ti_token)
    cond = encoder.encode(prompt)
    images: list[np.ndarray] = []
    records: list[dict] = []
    seeds = [config.seed_base + i for i in range(count)]
    for start in range(0, count, config.batch_size):
        chunk = seeds[start : start + config.batch_size]
        conds = np.broadcast_to(cond, (len(chunk), cond.shape[0]))
        stage1 = text2img_batch(model, conds, schedule, config.sampler_steps, chunk,
                                config.guidance)
        if config.use_img2img:
            refine_seeds = [derive_seed(s, "img2img") for s in chunk]
            out = img2img_batch(model, stage1, conds, schedule, config.strength,
                                config.sampler_steps, refine_seeds, config.guidance)
        else:
            refine_seeds = [None] * len(chunk)
            out = stage1
        for j, seed in enumerate(chunk):
            images.append(out[j])
            records.append(
                {
                    "label": label.value,
                    "index": start + j,
                    "seed": int(seed),
                    "img2img_seed": refine_seeds[j],
                    "prompt": prompt,
                    "use_ti": config.use_ti,
                    "use_img2img": config.use_img2img,
                    "strength": config.strength,
                    "sampler_steps": config.sampler_steps,
                    "guidance": config.guidance,
                }
            )
    return images, records


@dataclass
class AugmentationRun:
    arm: str
    input_digest: str
    plan: dict[str, int]
    records: list[dict]
    output_digest: str

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(
                {
                    "arm": self.arm,
                    "input_digest": self.input_digest,
                    "plan": self.plan,
                    "records": self.records,
                    "output_digest": self.output_digest,
                },
                sort_keys=True,
                indent=2,
            )
            + "\n",
            encoding="utf-8",
        )


def manifest_digest(manifest: Manifest) -> str:
    rows = []
    for s in manifest.samples:
        name = Path(s.image_ref).name if isinstance(s.image_ref, str) else "<memory>"
        rows.append([name, s.label.value, s.split, s.prompt, s.synthetic, s.seed])
    return digest_text(canonical_json({"image_size": manifest.image_size, "rows": rows}))


def augment_manifest(manifest: Manifest, model, encoder, target_per_class: int,
                     config: GenerationConfig, schedule: NoiseSchedule,
                     out_dir: str | Path, arm_name: str = "") -> tuple[Manifest, AugmentationRun]:
    """Top the train split up to ``target_per_class`` with synthetic samples.

    Real samples and the validation split are untouched. Synthetic images go
    to ``out_dir/images`` as 8-bit PNGs; on any write failure the partial
    outputs are removed before the error propagates.
    """
    out_dir = Path(out_dir)
    images_dir = out_dir / "images"
    images_dir.mkdir(parents=True, exist_ok=True)
    plan = balance_plan(manifest.class_counts("train"), target_per_class)
    new_samples = [replace(s) for s in manifest.samples]
    all_records: list[dict] = []
    written: list[Path] = []
    try:
        for label in LABELS:
            deficit = plan.get(label, 0)
            if deficit == 0:
                continue
            images, records = hybrid_generate(model, encoder, label, deficit, config, schedule)
            for image, record in zip(images, records):
                path = images_dir / f"syn_{label.value}_{record['index']:04d}_s{record['seed']}.png"
                save_image(image, path)
                written.append(path)
                record["file"] = path.name
                all_records.append(record)
                new_samples.append(
                    Sample(
                        image_ref=str(path.resolve()),
                        label=label,
                        split="train",
                        prompt=record["prompt"],
                        synthetic=True,
                        seed=record["seed"],
                    )
                )
    except Exception:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    meta = dict(manifest.metadata)
    meta["augmentation"] = {
        "arm": arm_name,
        "target_per_class": target_per_class,
        "plan": {k.value: v for k, v in plan.items()},
    }
    augmented = Manifest(samples=new_samples, image_size=manifest.image_size, metadata=meta)
    run = AugmentationRun(
        arm=arm_name,
        input_digest=manifest_digest(manifest),
        plan={k.value: v for k, v in plan.items()},
        records=all_records,
        output_digest=manifest_digest(augmented),
    )
    return augmented, run


# ---------------------------------------------------------------------------
# Experiment settings and shared artifacts


@dataclass
class ExperimentSettings:
    """Everything the five-arm experiment needs beyond the input manifest."""

    seed: int = 42
    image_size: int = 64
    # diffusion stand-in for the pretrained generative backbone
    denoiser_channels: int = 16
    denoiser_mults: tuple[int, ...] = (1, 2)
    cond_dim: int = 32
    emb_dim: int = 48
    timesteps: int = 200
    beta_min: float = 1e-4
    beta_max: float = 0.05
    base_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=1e-4, batch_size=16, epochs=30, seed=0))
    # low-rank adaptation
    lora_rank: int = 4
    lora_alpha: float = 4.0
    lora_targets: tuple[str, ...] = ()  # empty -> default conditioning/mid-dense maps
    lora_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=1e-4, batch_size=16, epochs=10, seed=0))
    # textual inversion
    ti_token: str = DEFAULT_TI_TOKEN
    ti_init: str = "image"
    ti_n_vec: int = 1
    ti_config: TextualInversionConfig = field(default_factory=TextualInversionConfig)
    # generation
    sampler_steps: int = 50
    strength: float = 0.3
    guidance: float = 1.0
    generation_batch: int = 16
    target_per_class: int | None = None
    # downstream classifier
    classifier_train: TrainConfig = field(default_factory=lambda: TrainConfig(
        learning_rate=1e-4, batch_size=16, epochs=30, seed=0))
    classifier_channels: int = 12
    # evaluation
    feature_dim: int = 64
    encoder_embed_dim: int = 16

    def schedule(self) -> NoiseSchedule:
        return make_schedule(self.timesteps, self.beta_min, self.beta_max)

    def denoiser_arch(self) -> DenoiserArch:
        return DenoiserArch(
            image_size=self.image_size,
            base_channels=self.denoiser_channels,
            channel_mults=tuple(self.denoiser_mults),
            cond_dim=self.cond_dim,
            emb_dim=self.emb_dim,
        )

    def classifier_arch(self) -> ClassifierArch:
        return ClassifierArch(image_size=self.image_size,
                              base_channels=self.classifier_channels)

    def digest(self) -> str:
        d = {}
        for key, value in vars(self).items():
            if isinstance(value, TrainConfig):
                d[key] = value.digest()
            elif isinstance(value, TextualInversionConfig):
                d[key] = value.digest()
            elif isinstance(value, tuple):
                d[key] = list(value)
            else:
                d[key] = value
        return digest_text(canonical_json(d))


class SharedArtifacts:
    """Lazily trained components reused across the arms of one run.

    The base denoiser stands in for a pretrained generative backbone; LoRA
    fine-tuning then adapts it, and textual inversion learns the custom
    token against the merged model. All stage seeds derive from the root
    seed by stable hashing, so any arm run in isolation reproduces the same
    artifacts bit for bit.
    """

    def __init__(self, manifest: Manifest, settings: ExperimentSettings,
                 out_dir: str | Path):
        self.manifest = manifest
        self.settings = settings
        self.out_dir = Path(out_dir)
        self.schedule = settings.schedule()
        self._encoder = None
        self._base_ckpt = None
        self._sampling_model = None
        self._token = None
        self._extractor = None
        self._real_stats = None

    def encoder(self) -> PromptEncoder:
        if self._encoder is None:
            self._encoder = PromptEncoder(
                embed_dim=self.settings.encoder_embed_dim,
                cond_dim=self.settings.cond_dim,
                seed=derive_seed(self.settings.seed, "encoder"),
            )
        return self._encoder

    def base_checkpoint(self) -> Checkpoint:
        if self._base_ckpt is None:
            path = self.out_dir / "checkpoints" / "base.ckpt"
            if path.exists():
                self._base_ckpt = Checkpoint.load(path)
            else:
                model = ConditionalDenoiser(self.settings.denoiser_arch(),
                                            seed=derive_seed(self.settings.seed, "model-init"))
                config = replace(self.settings.base_train,
                                 seed=derive_seed(self.settings.seed, "diffusion-base"))
                ckpt = train_diffusion(model, self.manifest, self.encoder(),
                                       self.schedule, config)
                path.parent.mkdir(parents=True, exist_ok=True)
                ckpt.save(path)
                self._base_ckpt = ckpt
        return self._base_ckpt

    def sampling_model(self) -> ConditionalDenoiser:
        """LoRA-fine-tuned model with adapters merged for sampling."""
        if self._sampling_model is None:
            path = self.out_dir / "checkpoints" / "lora.ckpt"
            if path.exists():
                ckpt = Checkpoint.load(path)
            else:
                model = self.base_checkpoint().build_model()
                targets = list(self.settings.lora_targets) or default_lora_targets(model)
                attach_lora(model, targets, self.settings.lora_rank,
                            self.settings.lora_alpha,
                            seed=derive_seed(self.settings.seed, "lora-init"))
                config = replace(self.settings.lora_train,
                                 seed=derive_seed(self.settings.seed, "lora-train"))
                ckpt = train_diffusion(model, self.manifest, self.encoder(),
                                       self.schedule, config)
                path.parent.mkdir(parents=True, exist_ok=True)
                ckpt.save(path)
                save_adapters(model, path.with_name("lora_adapters.bin"))
            self._sampling_model = merge_lora(ckpt.build_model())
        return self._sampling_model

    def token_embedding(self):
        """Learned token, trained against the frozen merged model."""
        if self._token is None:
            model = self.sampling_model()
            encoder = self.encoder()
            settings = self.settings
            token = settings.ti_token
            emb = register_token(encoder, token, settings.ti_init, settings.ti_n_vec)
            train = self.manifest.subset("train")
            images = np.stack([self.manifest.load_image(s) for s in train])
            prompts = [prompt_for_label(s.label, True, token) for s in train]
            config = replace(settings.ti_config,
                             seed=derive_seed(settings.seed, "ti-train"))
            emb = train_textual_inversion(model, encoder, images, prompts,
                                          self.schedule, config, token)
            token_path = self.out_dir / "checkpoints" / "token.bin"
            token_path.parent.mkdir(parents=True, exist_ok=True)
            emb.save(token_path)
            self._token = emb
        return self._token

    def extractor(self):
        if self._extractor is None:
            self._extractor = RandomConvFeatures(
                feature_dim=self.settings.feature_dim,
                input_size=self.settings.image_size,
                seed=derive_seed(self.settings.seed, "fid-extractor"),
            )
        return self._extractor

    def real_train_stats(self):
        if self._real_stats is None:
            train = self.manifest.subset("train")
            images = np.stack([self.manifest.load_image(s) for s in train])
            self._real_stats = fid_stats(extract_features(images, self.extractor()))
        return self._real_stats


def _generation_config(arm: ExperimentArm, settings: ExperimentSettings) -> GenerationConfig:
    return GenerationConfig(
        use_ti=arm.use_ti,
        use_img2img=arm.use_img2img,
        strength=settings.strength,
        sampler_steps=settings.sampler_steps,
        guidance=settings.guidance,
        seed_base=derive_seed(settings.seed, "generate") % 2**32,
        ti_token=settings.ti_token,
        batch_size=settings.generation_batch,
    )


def run_experiment(arm: ExperimentArm | str, manifest: Manifest,
                   shared: SharedArtifacts, arm_dir: str | Path) -> MetricsReport:
    """Train/evaluate one arm; returns its metrics report (FID absent for the
    baseline). Artifacts land under ``arm_dir``."""
    arm = ExperimentArm.parse(arm)
    settings = shared.settings
    arm_dir = Path(arm_dir)
    arm_dir.mkdir(parents=True, exist_ok=True)
    fid_value = None
    fid_meta: dict = {}
    if arm is ExperimentArm.BASELINE:
        train_manifest = manifest
    else:
        if arm.use_ti:
            shared.token_embedding()
        model = shared.sampling_model()
        target = settings.target_per_class
        if target is None:
            target = max(manifest.class_counts("train").values())
        config = _generation_config(arm, settings)
        train_manifest, run = augment_manifest(
            manifest, model, shared.encoder(), target, config,
            shared.schedule, arm_dir, arm_name=arm.value,
        )
        train_manifest.save(arm_dir / "manifest.jsonl")
        run.save(arm_dir / "augmentation_run.json")
        synthetic = [s for s in train_manifest.samples if s.synthetic]
        if synthetic:
            images = np.stack([train_manifest.load_image(s) for s in synthetic])
            syn_stats = fid_stats(extract_features(images, shared.extractor()))
            fid_value = fid(shared.real_train_stats(), syn_stats)
            fid_meta = {
                "fid_real_set": "train",
                "fid_n_real": shared.real_train_stats().n,
                "fid_n_synthetic": syn_stats.n,
                "fid_extractor": shared.extractor().name,
            }
    cls_config = replace(settings.classifier_train,
                         seed=derive_seed(settings.seed, "classifier"))
    classifier = train_classifier(train_manifest, cls_config, settings.classifier_arch())
    probs, labels = evaluate_split(classifier, manifest, "val")
    metadata = {
        "arm": arm.value,
        "seed": settings.seed,
        "settings_digest": shared.settings.digest(),
        "n_train": len(train_manifest.subset("train")),
        "n_val": int(labels.size),
        **fid_meta,
    }
    report = compute_metrics(probs, labels, fid_value=fid_value, metadata=metadata)
    (arm_dir / "report.json").write_text(
        json.dumps(report.to_json_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )
    return report


def run_all(manifest: Manifest, settings: ExperimentSettings,
            out_dir: str | Path) -> list[tuple[ExperimentArm, MetricsReport]]:
    """All five arms in the fixed order, sharing checkpoints and the token."""
    out_dir = Path(out_dir)
    shared = SharedArtifacts(manifest, settings, out_dir)
    results = []
    for arm in ARM_ORDER:
        report = run_experiment(arm, manifest, shared, out_dir / "arms" / arm.value)
        results.append((arm, report))
    return results
