"""Text and image encoders sharing one embedding space.

The detector only needs ``encode_text`` / ``encode_image`` and a fixed
``dim``. Tests and experiments run on deterministic mocks; the pretrained
adapter loads real weights when ``open_clip`` is installed.
"""

from __future__ import annotations

import hashlib
from typing import Mapping, Optional, Sequence

import numpy as np

BACKENDS = ("mock", "aligned-mock", "pretrained")


class EncoderError(RuntimeError):
    pass


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    if n == 0 or not np.isfinite(n):
        raise EncoderError("cannot normalize a zero or non-finite vector")
    return v / n


def _check_crop(crop) -> np.ndarray:
    crop = np.asarray(crop)
    if crop.ndim == 2:
        crop = np.repeat(crop[:, :, None], 3, axis=2)
    if crop.ndim != 3 or crop.shape[2] != 3:
        raise EncoderError(f"expected an HxWx3 crop, got shape {crop.shape}")
    if crop.shape[0] < 1 or crop.shape[1] < 1:
        raise EncoderError(f"degenerate crop of shape {crop.shape}")
    return crop


def hashed_vector(text: str, dim: int, seed: int = 0) -> np.ndarray:
    """Unit vector expanded from a keyed hash of ``text``."""
    digest = hashlib.blake2b(
        text.encode("utf-8"), digest_size=16, key=int(seed).to_bytes(8, "little", signed=True)
    ).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    return _unit(rng.standard_normal(dim))


def resize_crop(crop: np.ndarray, grid: int) -> np.ndarray:
    """Bilinear resize to ``grid x grid`` returning floats in [0, 1]."""
    from PIL import Image

    crop = np.clip(np.asarray(crop, dtype=np.float64), 0, 255).round().astype(np.uint8)
    im = Image.fromarray(np.ascontiguousarray(crop), mode="RGB").resize((grid, grid), Image.BILINEAR)
    return np.asarray(im, dtype=np.float64) / 255.0


class Encoder:
    dim: int

    def encode_text(self, prompt: str) -> np.ndarray:
        raise NotImplementedError

    def encode_image(self, crop) -> np.ndarray:
        raise NotImplementedError

    def encode_texts(self, prompts: Sequence[str]) -> np.ndarray:
        if not prompts:
            return np.zeros((0, self.dim))
        return np.stack([self.encode_text(p) for p in prompts])


class MockEncoder(Encoder):
    """Deterministic stand-in with no semantic alignment.

    Text: unit vector seeded from a keyed blake2b hash of the prompt bytes.
    Image: resize to ``grid x grid`` (bilinear), scale to [0, 1], subtract
    0.5, flatten, multiply by a fixed seeded Gaussian matrix, unit-normalize.
    """

    def __init__(self, dim: int = 64, seed: int = 0, grid: int = 8):
        self.dim = dim
        self.seed = seed
        self.grid = grid
        rng = np.random.default_rng(seed)
        n_in = grid * grid * 3
        self.projection = rng.standard_normal((dim, n_in)) / np.sqrt(n_in)

    def encode_text(self, prompt: str) -> np.ndarray:
        if not prompt:
            raise EncoderError("empty prompt")
        return hashed_vector(prompt, self.dim, self.seed)

    def encode_image(self, crop) -> np.ndarray:
        crop = _check_crop(crop)
        x = resize_crop(crop, self.grid).reshape(-1) - 0.5
        return _unit(self.projection @ x)


class AlignedMockEncoder(MockEncoder):
    """Mock whose text and image sides agree on a fixed set of classes.

    Each known class owns one of a set of orthonormal prototype vectors. Its
    name encodes to the prototype plus a small hashed perturbation. An image
    crop is reduced to the mean color of its colored pixels (channel spread
    above ``foreground_level``) and soft-assigned
    to the class palette; the embedding is the weighted prototype mix plus a
    small crop-specific term. Crops with almost no foreground map to a fixed
    background direction. Unknown prompts fall back to the plain hashed mock.
    """

    def __init__(
        self,
        class_names: Sequence[str],
        palette: Optional[Mapping[str, Sequence[float]]] = None,
        dim: int = 64,
        seed: int = 0,
        grid: int = 8,
        text_noise: float = 0.15,
        image_detail: float = 0.1,
        color_sigma: float = 30.0,
        foreground_level: float = 40.0,
    ):
        super().__init__(dim=dim, seed=seed, grid=grid)
        names = [n.lower() for n in class_names]
        if len(set(names)) != len(names):
            raise ValueError("duplicate class names")
        if len(names) + 1 > dim:
            raise ValueError(f"dim {dim} too small for {len(names)} orthogonal prototypes")
        rng = np.random.default_rng([seed, 7919])
        q, _ = np.linalg.qr(rng.standard_normal((dim, len(names) + 1)))
        self.prototypes = {n: q[:, i] for i, n in enumerate(names)}
        self.background = q[:, len(names)]
        self.palette = {n.lower(): np.asarray(c, dtype=np.float64) for n, c in (palette or {}).items()}
        unknown = set(self.palette) - set(self.prototypes)
        if unknown:
            raise ValueError(f"palette colors for unregistered classes: {sorted(unknown)}")
        self.text_noise = text_noise
        self.image_detail = image_detail
        self.color_sigma = color_sigma
        self.foreground_level = foreground_level

    def encode_text(self, prompt: str) -> np.ndarray:
        if not prompt:
            raise EncoderError("empty prompt")
        key = prompt.strip().lower()
        proto = self.prototypes.get(key)
        if proto is None:
            return hashed_vector(prompt, self.dim, self.seed)
        noise = hashed_vector("noise:" + key, self.dim, self.seed)
        return _unit(proto + self.text_noise * noise)

    def encode_image(self, crop) -> np.ndarray:
        crop = _check_crop(crop).astype(np.float64)
        detail = super().encode_image(crop)
        fg = (crop.max(axis=2) - crop.min(axis=2)) > self.foreground_level
        if not self.palette or fg.mean() < 0.02:
            return _unit(self.background + self.image_detail * detail)
        color = crop[fg].mean(axis=0)
        names = list(self.palette)
        d2 = np.array([np.sum((color - self.palette[n]) ** 2) for n in names])
        logits = -d2 / (2 * self.color_sigma**2)
        w = np.exp(logits - logits.max())
        w /= w.sum()
        mix = sum(wi * self.prototypes[n] for wi, n in zip(w, names))
        return _unit(mix + self.image_detail * detail)


class PretrainedEncoder(Encoder):
    """Adapter over an ``open_clip`` model (e.g. a BiomedCLIP hub checkpoint).

    Returns the projected, shared-space features. Requires ``open_clip`` and
    ``torch``; weights are fetched by ``open_clip`` from ``model_name``.
    """

    def __init__(self, model_name: str = "hf-hub:microsoft/BiomedCLIP-PubMedBERT_256-vit_base_patch16_224",
                 device: str = "cpu"):
        try:
            import open_clip
        except ImportError as exc:
            raise EncoderError("the pretrained backend needs the 'open_clip_torch' package") from exc
        import torch

        self._torch = torch
        self.model, self.preprocess = open_clip.create_model_from_pretrained(model_name)
        self.tokenizer = open_clip.get_tokenizer(model_name)
        self.model.eval().to(device)
        self.device = device
        with torch.no_grad():
            self.dim = int(self.model.encode_text(self.tokenizer(["x"]).to(device)).shape[-1])

    def encode_text(self, prompt: str) -> np.ndarray:
        if not prompt:
            raise EncoderError("empty prompt")
        with self._torch.no_grad():
            out = self.model.encode_text(self.tokenizer([prompt]).to(self.device))
        return out[0].double().cpu().numpy()

    def encode_image(self, crop) -> np.ndarray:
        from PIL import Image

        crop = _check_crop(crop)
        im = Image.fromarray(np.ascontiguousarray(crop.astype(np.uint8)), mode="RGB")
        with self._torch.no_grad():
            out = self.model.encode_image(self.preprocess(im)[None].to(self.device))
        return out[0].double().cpu().numpy()


def build_encoder(backend: str, dim: int = 64, seed: int = 0, **kwargs) -> Encoder:
    """Encoder factory for the ``encoder.backend`` config key."""
    if backend == "mock":
        return MockEncoder(dim=dim, seed=seed)
    if backend == "aligned-mock":
        return AlignedMockEncoder(dim=dim, seed=seed, **kwargs)
    if backend == "pretrained":
        return PretrainedEncoder(**kwargs)
    raise ValueError(f"unknown encoder backend {backend!r}; choose from {BACKENDS}")
