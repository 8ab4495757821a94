"""Contrastive vision-language encoder gateway.

Two interchangeable backends produce 512-d image/text embeddings: a
pretrained ViT-B/32 contrastive model (via ``transformers``) and a fully
deterministic offline stub for tests. Similarity scoring is a stabilized
softmax over embedding dot products.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass
from importlib import resources

import numpy as np

from . import imaging

EMBED_DIM = 512

DEFAULT_WEIGHTS = "openai/clip-vit-base-patch32"
WEIGHTS_ENV_VAR = "CLIP_RPN_WEIGHTS"

BUILTIN_PROMPT_SETS = ("p1", "p2", "p3")
DEFAULT_PROMPT_SET = "p3"


class WeightsUnavailableError(RuntimeError):
    """Raised when the real encoder backend cannot load its weights."""


@dataclass(frozen=True)
class PromptSet:
    """Ordered, named collection of text prompts (one per sub-network)."""

    name: str
    prompts: tuple[str, ...]

    def __post_init__(self) -> None:
        if len(self.prompts) < 2:
            raise ValueError(f"prompt set {self.name!r} needs at least 2 prompts")
        if any(not isinstance(p, str) or not p.strip() for p in self.prompts):
            raise ValueError(f"prompt set {self.name!r} contains an empty prompt")
        if len(set(self.prompts)) != len(self.prompts):
            raise ValueError(f"prompt set {self.name!r} contains duplicate prompts")

    def __len__(self) -> int:
        return len(self.prompts)


def prompt_set_hash(prompt_set: PromptSet) -> str:
    """Hash of the prompt texts alone; the set name does not affect identity."""
    payload = json.dumps(list(prompt_set.prompts), ensure_ascii=False)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def load_prompt_set(path: str | os.PathLike) -> PromptSet:
    with open(path) as handle:
        record = json.load(handle)
    return PromptSet(name=record["name"], prompts=tuple(record["prompts"]))


def builtin_prompt_set(name: str = DEFAULT_PROMPT_SET) -> PromptSet:
    if name not in BUILTIN_PROMPT_SETS:
        raise ValueError(f"unknown builtin prompt set {name!r}, have {BUILTIN_PROMPT_SETS}")
    text = resources.files("clip_rpn").joinpath(f"prompts/{name}.json").read_text()
    record = json.loads(text)
    return PromptSet(name=record["name"], prompts=tuple(record["prompts"]))


@dataclass
class Embedding:
    vector: np.ndarray
    modality: str  # "image" | "text"

    def __post_init__(self) -> None:
        self.vector = np.asarray(self.vector, dtype=np.float64)
        if self.vector.shape != (EMBED_DIM,):
            raise ValueError(f"embedding must have shape ({EMBED_DIM},), got {self.vector.shape}")
        if not np.isfinite(self.vector).all():
            raise ValueError("embedding contains non-finite entries")
        if self.modality not in ("image", "text"):
            raise ValueError(f"unknown modality {self.modality!r}")


def match_scores(img_emb: Embedding, txt_embs: list[Embedding]) -> list[float]:
    """Softmax over image-text dot products, stabilized by max subtraction."""
    if not txt_embs:
        raise ValueError("need at least one text embedding")
    for emb in txt_embs:
        if emb.vector.shape != img_emb.vector.shape:
            raise ValueError("embedding dimension mismatch")
    logits = np.array([img_emb.vector @ emb.vector for emb in txt_embs])
    shifted = np.exp(logits - logits.max())
    scores = shifted / shifted.sum()
    return [float(s) for s in scores]


def _l2_normalize(vec: np.ndarray) -> np.ndarray:
    return vec / np.linalg.norm(vec)


class StubEncoder:
    """Deterministic offline encoder: seeded projections, no semantics.

    Image embeddings are a fixed random projection of per-channel mean and
    variance statistics; text embeddings are seeded from a keyed hash of the
    prompt text. Reproducible across machines for a fixed seed.
    """

    # appended constant keeps the stats vector (and its projection) nonzero
    _STATS_DIM = 7
    _TEXT_KEY = b"clip-rpn-stub-text:"

    def __init__(self, seed: int = 0, normalize: bool = True):
        self.seed = seed
        self.normalize = normalize
        rng = np.random.default_rng(seed)
        self._proj = rng.standard_normal((EMBED_DIM, self._STATS_DIM)) / np.sqrt(self._STATS_DIM)
        self._text_cache: dict[str, np.ndarray] = {}
        self._cache_lock = threading.Lock()

    def _image_stats(self, img: np.ndarray) -> np.ndarray:
        means = img.mean(axis=(0, 1))
        variances = img.var(axis=(0, 1))
        return np.concatenate([means, variances, [1.0]])

    def encode_image(self, img: np.ndarray) -> Embedding:
        imaging.validate_image(img)
        vec = self._proj @ self._image_stats(img)
        if self.normalize:
            vec = _l2_normalize(vec)
        return Embedding(vector=vec, modality="image")

    def _encode_text(self, text: str) -> np.ndarray:
        digest = hashlib.sha256(self._TEXT_KEY + text.encode("utf-8")).digest()
        rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
        vec = rng.standard_normal(EMBED_DIM)
        if self.normalize:
            vec = _l2_normalize(vec)
        return vec

    def encode_prompts(self, prompt_set: PromptSet) -> list[Embedding]:
        out = []
        for text in prompt_set.prompts:
            with self._cache_lock:
                cached = self._text_cache.get(text)
            if cached is None:
                cached = self._encode_text(text)
                with self._cache_lock:
                    self._text_cache[text] = cached
            out.append(Embedding(vector=cached, modality="text"))
        return out


class ClipEncoder:
    """Pretrained contrastive encoder backend (ViT-B/32 by default).

    Imports ``transformers`` lazily; any load failure surfaces as
    WeightsUnavailableError so offline callers can fall back or skip.
    """

    def __init__(self, weights: str | None = None, normalize: bool = True):
        self.normalize = normalize
        self.weights = weights or os.environ.get(WEIGHTS_ENV_VAR) or DEFAULT_WEIGHTS
        try:
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as exc:
            raise WeightsUnavailableError(
                "the real backend requires the 'transformers' package"
            ) from exc
        try:
            self._model = CLIPModel.from_pretrained(self.weights)
            self._processor = CLIPProcessor.from_pretrained(self.weights)
        except Exception as exc:
            raise WeightsUnavailableError(f"could not load weights {self.weights!r}") from exc
        self._model.eval()
        self._text_cache: dict[str, np.ndarray] = {}
        self._cache_lock = threading.Lock()

    def encode_image(self, img: np.ndarray) -> Embedding:
        import torch
        from PIL import Image as PILImage

        imaging.validate_image(img)
        quantized = np.floor(img * 255.0 + 0.5).astype(np.uint8)
        inputs = self._processor(images=PILImage.fromarray(quantized), return_tensors="pt")
        with torch.no_grad():
            feats = self._model.get_image_features(**inputs)
        vec = feats[0].double().numpy()
        if self.normalize:
            vec = _l2_normalize(vec)
        return Embedding(vector=vec, modality="image")

    def _encode_text(self, text: str) -> np.ndarray:
        import torch

        inputs = self._processor(text=[text], return_tensors="pt", padding=True)
        with torch.no_grad():
            feats = self._model.get_text_features(**inputs)
        vec = feats[0].double().numpy()
        if self.normalize:
            vec = _l2_normalize(vec)
        return vec

    def encode_prompts(self, prompt_set: PromptSet) -> list[Embedding]:
        out = []
        for text in prompt_set.prompts:
            with self._cache_lock:
                cached = self._text_cache.get(text)
            if cached is None:
                cached = self._encode_text(text)
                with self._cache_lock:
                    self._text_cache[text] = cached
            out.append(Embedding(vector=cached, modality="text"))
        return out


def create_encoder(
    backend: str = "stub",
    weights: str | None = None,
    normalize: bool = True,
    seed: int = 0,
):
    if backend == "stub":
        return StubEncoder(seed=seed, normalize=normalize)
    if backend == "real":
        return ClipEncoder(weights=weights, normalize=normalize)
    raise ValueError(f"unknown backend {backend!r}, expected 'stub' or 'real'")
