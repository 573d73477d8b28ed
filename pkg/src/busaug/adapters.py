"""Prompt encoder, low-rank adapters, and textual-inversion token training."""

from __future__ import annotations

import string
from dataclasses import dataclass

import numpy as np

from . import nn
from .data import LABELS, prompt_for_label
from .diffusion import NoiseSchedule, denoising_loss_and_grads
from .tensorfile import write_tensors, read_tensors
from .util import canonical_json, digest_text


class AdapterError(ValueError):
    pass


def default_vocabulary() -> list[str]:
    """Words of the six class prompt templates, sorted."""
    words = set()
    for label in LABELS:
        words.update(prompt_for_label(label).split())
    return sorted(words)


_PUNCT = string.punctuation


class PromptEncoder:
    """Mean-pooled token embeddings projected to a conditioning vector.

    Tokenization is lowercase whitespace splitting with punctuation stripped
    from word edges; registered special tokens (like ``<ultrasound>``) match
    verbatim before any stripping. Learned token rows live in their own
    parameter blocks (``token:<name>``) so base weights stay untouched by
    textual inversion.
    """

    def __init__(self, vocab: list[str] | None = None, embed_dim: int = 16,
                 cond_dim: int = 32, seed: int = 0, dtype: str = "float64"):
        self.vocab = list(vocab) if vocab is not None else default_vocabulary()
        if len(set(self.vocab)) != len(self.vocab):
            raise AdapterError("vocabulary contains duplicates")
        self.index = {w: i for i, w in enumerate(self.vocab)}
        self.embed_dim = embed_dim
        self.cond_dim = cond_dim
        self.store = nn.ParamStore(dtype=dtype)
        rng = np.random.default_rng(seed)
        self.store.add("embedding", rng.standard_normal((len(self.vocab), embed_dim))
                       .astype(self.store.dtype))
        hidden = max(embed_dim, cond_dim)
        self.fc1 = nn.Linear(self.store, "proj.fc1", embed_dim, hidden, rng)
        self.act = nn.SiLU("proj.act")
        self.fc2 = nn.Linear(self.store, "proj.fc2", hidden, cond_dim, rng)
        self.learned_tokens: dict[str, TokenEmbedding] = {}

    # -- tokenization ------------------------------------------------------

    def tokenize(self, prompt: str, strict: bool = True) -> list[str]:
        tokens = []
        for raw in prompt.lower().split():
            if raw in self.learned_tokens or raw in self.index:
                tokens.append(raw)
                continue
            if raw.startswith("<") and raw.endswith(">") and len(raw) > 2:
                # special-token syntax never degrades to the bare word
                if strict:
                    raise AdapterError(f"unregistered token {raw!r} in prompt {prompt!r}")
                continue
            word = raw.strip(_PUNCT)
            if word in self.index or word in self.learned_tokens:
                tokens.append(word)
            elif strict:
                raise AdapterError(f"unknown token {raw!r} in prompt {prompt!r}")
        return tokens

    def _rows(self, tokens: list[str]) -> list[tuple[str, int]]:
        """(parameter name, row index) per pooled embedding row."""
        rows = []
        for tok in tokens:
            if tok in self.learned_tokens:
                n_vec = self.learned_tokens[tok].vectors.shape[0]
                rows.extend((f"token:{tok}", i) for i in range(n_vec))
            else:
                rows.append(("embedding", self.index[tok]))
        return rows

    # -- encoding ----------------------------------------------------------

    def encode(self, prompt: str) -> np.ndarray:
        cond, _ = self.encode_with_cache(prompt, cache=None)
        return cond

    def encode_with_cache(self, prompt: str, cache: dict | None) -> tuple[np.ndarray, list]:
        rows = self._rows(self.tokenize(prompt))
        if not rows:
            raise AdapterError(f"prompt {prompt!r} has no usable tokens")
        stacked = np.stack([self.store.get(name)[i] for name, i in rows])
        pooled = stacked.mean(axis=0)[None, :]
        h = self.fc1.forward(pooled, cache)
        h = self.act.forward(h, cache)
        cond = self.fc2.forward(h, cache)[0]
        return cond, rows

    def backward_cond(self, dcond: np.ndarray, cache: dict, rows: list,
                      grads: dict) -> None:
        """Accumulate grads of the projection and of every pooled row."""
        dh = self.fc2.backward(dcond[None, :], cache, grads)
        dh = self.act.backward(dh, cache, grads)
        dpooled = self.fc1.backward(dh, cache, grads)[0]
        per_row = dpooled / len(rows)
        for name, i in rows:
            if name not in grads:
                grads[name] = np.zeros_like(self.store.get(name))
            grads[name][i] += per_row

    def parameter_names(self) -> list[str]:
        return self.store.names()


# ---------------------------------------------------------------------------
# Textual inversion


@dataclass
class TokenEmbedding:
    token: str
    vectors: np.ndarray  # (n_vec, embed_dim)
    init_source: str

    FORMAT = "token-embedding"

    def save(self, path) -> None:
        meta = {"token": self.token, "init_source": self.init_source}
        write_tensors(path, self.FORMAT, meta, {"vectors": self.vectors})

    @classmethod
    def load(cls, path) -> "TokenEmbedding":
        meta, tensors = read_tensors(path, expect_kind=cls.FORMAT)
        return cls(token=meta["token"], vectors=tensors["vectors"],
                   init_source=meta["init_source"])


def register_token(encoder: PromptEncoder, token: str, init_source: str = "image",
                   n_vec: int = 1, vectors: np.ndarray | None = None) -> TokenEmbedding:
    """Add a new learnable token; rows start from a word's embedding or the
    vocabulary mean. Passing ``vectors`` restores a previously trained token."""
    if n_vec < 1:
        raise AdapterError("n_vec must be >= 1")
    if token in encoder.index:
        raise AdapterError(f"token {token!r} is already a base vocabulary word")
    if token in encoder.learned_tokens:
        raise AdapterError(f"token {token!r} is already registered")
    table = encoder.store.params["embedding"]
    if vectors is not None:
        init = np.asarray(vectors, dtype=encoder.store.dtype)
        if init.shape != (n_vec, encoder.embed_dim):
            raise AdapterError(f"restored vectors have shape {init.shape}, "
                               f"expected {(n_vec, encoder.embed_dim)}")
        init = init.copy()
    elif init_source == "mean":
        init = np.repeat(table.mean(axis=0, keepdims=True), n_vec, axis=0)
    else:
        if init_source not in encoder.index:
            raise AdapterError(f"init word {init_source!r} not in vocabulary")
        init = np.repeat(table[encoder.index[init_source]][None, :], n_vec, axis=0)
    name = f"token:{token}"
    encoder.store.add(name, init)
    emb = TokenEmbedding(token=token, vectors=encoder.store.params[name],
                         init_source=init_source)
    encoder.learned_tokens[token] = emb
    return emb


@dataclass
class TextualInversionConfig:
    steps: int = 500
    learning_rate: float = 5e-3
    batch_size: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.steps < 0:
            raise AdapterError("steps must be >= 0")
        if self.learning_rate <= 0:
            raise AdapterError("learning_rate must be positive")
        if self.batch_size < 1:
            raise AdapterError("batch_size must be >= 1")

    def digest(self) -> str:
        return digest_text(canonical_json(vars(self)))


def train_textual_inversion(model, encoder: PromptEncoder, images: np.ndarray,
                            prompts: list[str], schedule: NoiseSchedule,
                            config: TextualInversionConfig,
                            token: str) -> TokenEmbedding:
    """Optimize only the token's embedding rows against the denoising loss.

    The model and every other encoder tensor are left bit-identical. The
    images/prompts pair one prompt per image; each prompt must be encodable
    and at least one must contain the token.
    """
    if token not in encoder.learned_tokens:
        raise AdapterError(f"token {token!r} is not registered")
    images = np.asarray(images)
    if images.ndim == 3:
        images = images[:, None]
    if len(prompts) != images.shape[0]:
        raise AdapterError("images and prompts must pair one to one")
    tokenized = [encoder.tokenize(p) for p in prompts]
    if not any(token in toks for toks in tokenized):
        raise AdapterError(f"token {token!r} appears in none of the training prompts")
    pname = f"token:{token}"
    opt = nn.Adam(encoder.store, config.learning_rate, selector=lambda n: n == pname)
    rng = np.random.default_rng(config.seed)
    n = images.shape[0]
    for _ in range(config.steps):
        idx = rng.integers(0, n, size=min(config.batch_size, n))
        batch_prompts = [prompts[i] for i in idx]
        unique = sorted(set(batch_prompts))
        enc_cache = {}
        for p in unique:
            cache: dict = {}
            cond, rows = encoder.encode_with_cache(p, cache)
            enc_cache[p] = (cond, cache, rows)
        conds = np.stack([enc_cache[p][0] for p in batch_prompts])
        step_seed = int(rng.integers(0, 2**63))
        _, _, dconds = denoising_loss_and_grads(model, images[idx], conds, schedule, step_seed)
        grads: dict = {}
        for p, dcond_rows in _group_dconds(batch_prompts, dconds).items():
            _, cache, rows = enc_cache[p]
            encoder.backward_cond(dcond_rows, cache, rows, grads)
        opt.step(grads)
    return encoder.learned_tokens[token]


def _group_dconds(batch_prompts: list[str], dconds: np.ndarray) -> dict[str, np.ndarray]:
    grouped: dict[str, np.ndarray] = {}
    for p, d in zip(batch_prompts, dconds):
        if p in grouped:
            grouped[p] = grouped[p] + d
        else:
            grouped[p] = d.copy()
    return grouped


# ---------------------------------------------------------------------------
# LoRA


@dataclass
class LoRAAdapter:
    target_name: str
    rank: int
    alpha: float
    A: np.ndarray  # (rank, k)
    B: np.ndarray  # (d, rank)


ADAPTER_FORMAT = "lora-adapters"


def attach_lora(model_or_encoder, target_names: list[str], rank: int, alpha: float,
                seed: int) -> list[LoRAAdapter]:
    """Attach zero-initialized low-rank deltas to named 2-D weights.

    Each target's forward becomes x -> (W + (alpha/rank) B A) x with A
    seeded-Gaussian and B zero, so outputs are bit-identical to the base
    model until training moves B. Base parameters are flagged frozen.
    """
    store = model_or_encoder.store
    if rank < 1:
        raise AdapterError(f"rank must be >= 1, got {rank}")
    rng = np.random.default_rng(seed)
    adapters = []
    for target in target_names:
        if target not in store.params:
            raise AdapterError(f"no parameter named {target!r}")
        w = store.params[target]
        if w.ndim != 2:
            raise AdapterError(f"LoRA target {target!r} must be 2-D, got shape {w.shape}")
        d, k = w.shape
        if rank > min(d, k):
            raise AdapterError(f"rank {rank} exceeds min dimension {min(d, k)} of {target!r}")
        A = (rng.standard_normal((rank, k)) / np.sqrt(k)).astype(store.dtype)
        B = np.zeros((d, rank), dtype=store.dtype)
        store.attach_adapter(target, A=A, B=B, rank=rank, alpha=alpha)
        ad = store.adapters[target]
        adapters.append(LoRAAdapter(target_name=target, rank=rank, alpha=alpha,
                                    A=ad["A"], B=ad["B"]))
    store.freeze_base()
    return adapters


def merge_lora(model):
    """Bake adapter deltas into the base weights and drop the adapters.

    Merging an already-merged (or never-adapted) model is an error.
    """
    store = model.store
    if not store.adapters:
        raise AdapterError("no adapters attached (already merged?)")
    for target in list(store.adapters):
        store.params[target] += store.adapter_delta(target).astype(store.dtype)
        del store.adapters[target]
    store.frozen.clear()
    return model


def lora_parameter_selector(name: str) -> bool:
    return "::lora_" in name


def default_lora_targets(model) -> list[str]:
    """Conditioning-projection maps plus the mid-block dense map."""
    names = [n for n in model.store.params if n.endswith(".film.weight")]
    for extra in ("cond_proj.weight", "mid.dense.weight"):
        if extra in model.store.params:
            names.append(extra)
    return sorted(names)


def save_adapters(model, path) -> None:
    store = model.store
    if not store.adapters:
        raise AdapterError("no adapters to save")
    meta = {
        "adapters": [
            {"target": t, "rank": ad["rank"], "alpha": ad["alpha"]}
            for t, ad in sorted(store.adapters.items())
        ]
    }
    tensors = {}
    for t, ad in store.adapters.items():
        tensors[f"{t}::lora_A"] = ad["A"]
        tensors[f"{t}::lora_B"] = ad["B"]
    write_tensors(path, ADAPTER_FORMAT, meta, tensors)


def load_adapters_into(model, path) -> list[LoRAAdapter]:
    meta, tensors = read_tensors(path, expect_kind=ADAPTER_FORMAT)
    adapters = []
    for spec in meta["adapters"]:
        t = spec["target"]
        model.store.attach_adapter(
            t, A=tensors[f"{t}::lora_A"], B=tensors[f"{t}::lora_B"],
            rank=spec["rank"], alpha=spec["alpha"],
        )
        ad = model.store.adapters[t]
        adapters.append(LoRAAdapter(target_name=t, rank=spec["rank"], alpha=spec["alpha"],
                                    A=ad["A"], B=ad["B"]))
    model.store.freeze_base()
    return adapters
