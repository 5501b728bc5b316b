"""Feature encoders: pretrained DINO/CLIP backends and an offline stub.

The stub derives every feature from SHA-256 digests of the pixel (or
text) content, so it needs no downloads and is bit-reproducible across
machines. Real encoders are loaded lazily; any import or download
failure surfaces as ModelUnavailable.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np


class ModelUnavailable(Exception):
    """A pretrained encoder could not be loaded."""


def _digest_floats(key: bytes, dim: int) -> np.ndarray:
    """Expand a key into a deterministic unit vector of the given dimension."""
    chunks = []
    needed = dim * 4
    digest = hashlib.sha256(key).digest()
    while sum(len(c) for c in chunks) < needed:
        digest = hashlib.sha256(digest).digest()
        chunks.append(digest)
    raw = b"".join(chunks)[:needed]
    ints = np.frombuffer(raw, dtype="<u4").astype(np.float64)
    vec = ints / 2**31 - 1.0
    norm = np.linalg.norm(vec)
    if norm < 1e-12:  # unreachable in practice, keep the contract anyway
        vec = np.ones(dim)
        norm = np.linalg.norm(vec)
    return vec / norm


class StubEncoder:
    """Download-free deterministic encoder for tests and CI."""

    def __init__(self, d_dino: int = 48, d_clip: int = 96):
        self.d_dino = d_dino
        self.d_clip = d_clip

    def pixel_features(self, image: np.ndarray, pixels: np.ndarray, kind: str, level: int | None) -> np.ndarray:
        dim = self.d_dino if kind == "dino" else self.d_clip
        tag = f"{kind}/{level}".encode()
        out = np.empty((len(pixels), dim))
        for row, (u, v) in enumerate(pixels):
            color = image[int(v), int(u)].tobytes()
            key = tag + struct.pack("<qq", int(u), int(v)) + color
            out[row] = _digest_floats(key, dim)
        return out

    def text_features(self, texts: list[str]) -> np.ndarray:
        return np.stack([_digest_floats(b"text/" + t.encode("utf-8"), self.d_clip) for t in texts])


class PretrainedEncoder:
    """DINO patch features and CLIP crop/text features via transformers.

    CLIP levels are produced from a square tiling of the image at each
    crop scale: every pixel inherits the embedding of its tile.
    """

    def __init__(self, dino_model: str, clip_model: str, crop_scales: tuple[float, float, float]):
        self.crop_scales = crop_scales
        try:
            import torch  # noqa: F401
            from transformers import AutoImageProcessor, AutoModel, CLIPModel, CLIPProcessor
        except ImportError as err:
            raise ModelUnavailable(f"neural-model stack not installed: {err}") from err
        try:
            self._torch = torch
            self.dino_processor = AutoImageProcessor.from_pretrained(dino_model)
            self.dino = AutoModel.from_pretrained(dino_model)
            self.clip_processor = CLIPProcessor.from_pretrained(clip_model)
            self.clip = CLIPModel.from_pretrained(clip_model)
            self.dino.eval()
            self.clip.eval()
        except Exception as err:  # download/deserialize failures included
            raise ModelUnavailable(f"cannot load pretrained encoders: {err}") from err

    def _dino_pixel_grid(self, image: np.ndarray) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            inputs = self.dino_processor(images=image, return_tensors="pt")
            hidden = self.dino(**inputs).last_hidden_state[0]
        patches = hidden[1:]  # drop the class token
        side = int(np.sqrt(len(patches)))
        grid = patches[: side * side].reshape(side, side, -1).numpy()
        return grid

    def pixel_features(self, image: np.ndarray, pixels: np.ndarray, kind: str, level: int | None) -> np.ndarray:
        h, w = image.shape[:2]
        if kind == "dino":
            grid = self._dino_pixel_grid(image)
            side = grid.shape[0]
            rows = np.clip((pixels[:, 1] * side) // h, 0, side - 1).astype(int)
            cols = np.clip((pixels[:, 0] * side) // w, 0, side - 1).astype(int)
            feats = grid[rows, cols]
        else:
            scale = self.crop_scales[level]
            window = max(int(round(scale * min(h, w))), 8)
            tiles = {}
            feats = np.empty((len(pixels), self.clip.config.projection_dim))
            torch = self._torch
            for row, (u, v) in enumerate(pixels):
                tu, tv = int(u) // window, int(v) // window
                if (tu, tv) not in tiles:
                    crop = image[
                        tv * window: min((tv + 1) * window, h),
                        tu * window: min((tu + 1) * window, w),
                    ]
                    with torch.no_grad():
                        inputs = self.clip_processor(images=crop, return_tensors="pt")
                        tiles[(tu, tv)] = self.clip.get_image_features(**inputs)[0].numpy()
                feats[row] = tiles[(tu, tv)]
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        return feats / np.maximum(norms, 1e-12)

    def text_features(self, texts: list[str]) -> np.ndarray:
        torch = self._torch
        with torch.no_grad():
            inputs = self.clip_processor(text=texts, return_tensors="pt", padding=True)
            feats = self.clip.get_text_features(
                input_ids=inputs["input_ids"], attention_mask=inputs["attention_mask"]
            ).numpy()
        return feats / np.linalg.norm(feats, axis=1, keepdims=True)
