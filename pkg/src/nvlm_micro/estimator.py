"""scikit-learn style wrappers around the tiler and the model."""

from __future__ import annotations

from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import config as config_mod
from .model import ARCHS, NVLMModel, TrainingExample
from .tiler import Image, RatioSet, cut, layout


def _as_image(x) -> Image | None:
    if x is None or isinstance(x, Image):
        return x
    return Image(np.asarray(x, dtype=np.float64))


def check_pairs(X) -> list[tuple[Image | None, str]]:
    """Validate ``X`` as a sequence of ``(image_or_None, prompt)`` pairs."""
    out = []
    for i, item in enumerate(X):
        try:
            image, prompt = item
        except (TypeError, ValueError) as exc:
            raise ValueError(f"X[{i}] must be an (image, prompt) pair") from exc
        if not isinstance(prompt, str):
            raise TypeError(f"X[{i}] prompt must be str, got {type(prompt).__name__}")
        out.append((_as_image(image), prompt))
    if not out:
        raise ValueError("X is empty")
    return out


class DynamicTiler(TransformerMixin, BaseEstimator):
    """Maps images to lists of tiles (thumbnail last). Stateless."""

    def __init__(self, max_tiles: int = 6, tile_size: int = 448, thumbnail: bool = True):
        self.max_tiles = max_tiles
        self.tile_size = tile_size
        self.thumbnail = thumbnail

    def fit(self, X=None, y=None):
        self.ratios_ = RatioSet.up_to(self.max_tiles)
        return self

    def transform(self, X) -> list[list[Image]]:
        check_is_fitted(self, "ratios_")
        out = []
        for x in X:
            image = _as_image(x)
            tiles, thumb = cut(image, layout(image, self.ratios_, self.tile_size, self.thumbnail))
            out.append(tiles + ([thumb] if thumb is not None else []))
        return out


class NVLMEstimator(BaseEstimator):
    """Fit a toy model on ``(image, prompt)`` pairs with string targets.

    ``predict`` decodes greedily; ``score`` is exact-match accuracy.  The
    loss never covers the closing ``<|im_end|>``, so generation stops after
    ``max_new_tokens`` bytes, by default the longest response seen in ``fit``.
    """

    def __init__(self, arch: str = "X", config: str | None = None, steps: int = 2000, stage: int = 2,
                 lr: float = 1e-3, batch_size: int = 8, target_loss: float = 0.05,
                 max_new_tokens: int | None = None, seed: int | None = None):
        self.arch = arch
        self.config = config
        self.steps = steps
        self.stage = stage
        self.lr = lr
        self.batch_size = batch_size
        self.target_loss = target_loss
        self.max_new_tokens = max_new_tokens
        self.seed = seed

    def _examples(self, X, y: Sequence[str]) -> list[TrainingExample]:
        pairs = check_pairs(X)
        y = list(y)
        if len(y) != len(pairs):
            raise ValueError(f"X has {len(pairs)} items but y has {len(y)}")
        return [TrainingExample(p, str(r), im) for (im, p), r in zip(pairs, y)]

    def fit(self, X, y):
        from .train import overfit_harness

        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        examples = self._examples(X, y)
        cfg = config_mod.load(self.config)
        seed = config_mod.default_seed() if self.seed is None else self.seed
        tc = cfg.train
        tc.steps, tc.stage, tc.lr = self.steps, self.stage, self.lr
        tc.batch_size, tc.target_loss = self.batch_size, self.target_loss
        self.max_response_len_ = max(len(ex.response.encode("utf-8")) for ex in examples)
        self.model_ = NVLMModel(self.arch, cfg, seed)
        self.loss_curve_ = overfit_harness(self.model_, examples, tc, seed=seed)
        return self

    def predict(self, X) -> list[str]:
        check_is_fitted(self, "model_")
        n = self.max_new_tokens or self.max_response_len_
        return [self.model_.generate(im, p, n) for im, p in check_pairs(X)]

    def loss(self, X, y) -> float:
        """Mean masked next-token loss."""
        check_is_fitted(self, "model_")
        return float(np.mean([self.model_.loss(ex) for ex in self._examples(X, y)]))

    def score(self, X, y) -> float:
        pred = self.predict(X)
        return float(np.mean([p == t for p, t in zip(pred, y)]))
