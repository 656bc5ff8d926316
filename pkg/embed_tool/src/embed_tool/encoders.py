"""Pluggable image/text encoders.

Two families:

* ``hash-projection`` - a dependency-free deterministic encoder: handcrafted
  features (character trigram counts for text, downsampled intensity plus
  gradient statistics for images) pushed through a fixed seeded random
  projection and L2-normalized.  No semantic pretraining, but similar inputs
  land near each other, which is enough for offline pipelines and tests.
* ``clip:<model-id>`` - a CLIP-class vision-language encoder loaded through
  `transformers` from the local cache only.  Raises EncoderLoadFailure when
  the weights are not available on this machine.

The cache header records whichever encoder produced the vectors.
"""

from __future__ import annotations

import hashlib

import numpy as np


class EncoderLoadFailure(Exception):
    pass


class HashProjectionEncoder:
    """Deterministic local encoder with a shared text/image output space."""

    name_prefix = "hash-projection"
    _TEXT_FEATURES = 1024
    _IMAGE_SIDE = 16

    def __init__(self, dimension: int = 512):
        self.dimension = int(dimension)
        self.name = f"{self.name_prefix}-{self.dimension}"
        rng = np.random.default_rng(
            np.random.SeedSequence([0x5EED, self.dimension]))
        n_feat = self._TEXT_FEATURES + self._IMAGE_SIDE ** 2 + 2
        self._projection = rng.standard_normal((n_feat, self.dimension))
        self._projection /= np.linalg.norm(self._projection, axis=0, keepdims=True)

    def _project(self, features: np.ndarray) -> np.ndarray:
        vec = features @ self._projection
        norm = np.linalg.norm(vec)
        if norm == 0.0:
            # Degenerate inputs (e.g. empty text) still need a valid vector.
            digest = hashlib.sha256(features.tobytes()).digest()
            rng = np.random.default_rng(int.from_bytes(digest[:8], "little"))
            vec = rng.standard_normal(self.dimension)
            norm = np.linalg.norm(vec)
        return vec / norm

    def encode_text(self, text: str) -> np.ndarray:
        feats = np.zeros(self._TEXT_FEATURES + self._IMAGE_SIDE ** 2 + 2)
        data = text.lower().encode("utf-8")
        for i in range(len(data) - 2):
            h = int.from_bytes(hashlib.blake2b(data[i:i + 3], digest_size=4).digest(),
                               "little")
            feats[h % self._TEXT_FEATURES] += 1.0
        feats[-2] = len(data)
        if feats[:self._TEXT_FEATURES].sum() > 0:
            feats[:self._TEXT_FEATURES] /= feats[:self._TEXT_FEATURES].sum()
        return self._project(feats)

    def encode_image(self, path) -> np.ndarray:
        from PIL import Image

        with Image.open(path) as img:
            gray = np.asarray(
                img.convert("L").resize((self._IMAGE_SIDE, self._IMAGE_SIDE)),
                dtype=np.float64) / 255.0
        feats = np.zeros(self._TEXT_FEATURES + self._IMAGE_SIDE ** 2 + 2)
        block = gray.reshape(-1)
        feats[self._TEXT_FEATURES:self._TEXT_FEATURES + block.size] = block - block.mean()
        feats[-1] = float(np.abs(np.diff(gray, axis=0)).mean()
                          + np.abs(np.diff(gray, axis=1)).mean())
        return self._project(feats)


class ClipEncoder:
    """CLIP-class encoder via transformers; local weights only."""

    def __init__(self, model_id: str = "openai/clip-vit-base-patch32"):
        try:
            import torch
            from transformers import CLIPModel, CLIPProcessor
        except ImportError as e:
            raise EncoderLoadFailure(
                f"transformers/torch unavailable for CLIP encoding: {e}") from e
        try:
            self._model = CLIPModel.from_pretrained(model_id, local_files_only=True)
            self._processor = CLIPProcessor.from_pretrained(model_id, local_files_only=True)
        except Exception as e:
            raise EncoderLoadFailure(
                f"cannot load {model_id!r} from the local cache: {e}") from e
        self._model.eval()
        self._torch = torch
        self.name = f"clip:{model_id}"
        self.dimension = int(self._model.config.projection_dim)

    def encode_text(self, text: str) -> np.ndarray:
        inputs = self._processor(text=[text], return_tensors="pt", padding=True)
        with self._torch.no_grad():
            out = self._model.get_text_features(**inputs)
        vec = out[0].double().numpy()
        return vec / np.linalg.norm(vec)

    def encode_image(self, path) -> np.ndarray:
        from PIL import Image

        with Image.open(path) as img:
            inputs = self._processor(images=img.convert("RGB"), return_tensors="pt")
        with self._torch.no_grad():
            out = self._model.get_image_features(**inputs)
        vec = out[0].double().numpy()
        return vec / np.linalg.norm(vec)


def make_encoder(encoder_id: str, dimension: int = 512):
    """Registry: 'hash-projection[-D]' or 'clip:<model-id>'."""
    if encoder_id.startswith("clip:"):
        return ClipEncoder(encoder_id.split(":", 1)[1])
    if encoder_id == "clip":
        return ClipEncoder()
    if encoder_id.startswith(HashProjectionEncoder.name_prefix):
        suffix = encoder_id[len(HashProjectionEncoder.name_prefix):]
        if suffix.startswith("-"):
            dimension = int(suffix[1:])
        return HashProjectionEncoder(dimension)
    raise EncoderLoadFailure(f"unknown encoder {encoder_id!r}")
