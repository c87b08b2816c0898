import json

import numpy as np
import pytest

from dinoclip.data import load_manifest
from dinoclip.encoders import (DinoProjectorConfig, ModelConfig, TextEncoderConfig,
                               VisionEncoderConfig)

FIXTURE_CAPTIONS_EN = [
    "airport with runways", "dense residential area", "baseball field",
    "large parking lot", "stadium with seats", "green playground",
    "river through town", "bridge over water", "forest with trees",
    "desert with sand", "harbor with boats", "farmland with crops",
    "school with yard", "railway station", "mountain with snow",
    "island in the sea",
]

FIXTURE_CAPTIONS_DE = [
    "Flughafen mit Landebahnen", "dichtes Wohngebiet", "Baseballfeld",
    "grosser Parkplatz", "Stadion mit Sitzen", "gruener Spielplatz",
    "Fluss durch die Stadt", "Bruecke ueber Wasser", "Wald mit Baeumen",
    "Wueste mit Sand", "Hafen mit Booten", "Ackerland mit Feldern",
    "Schule mit Hof", "Bahnhof", "Berg mit Schnee", "Insel im Meer",
]


def tiny_model_config(k: int = 8, vocab: int = 512) -> ModelConfig:
    """Smallest config that still exercises every code path.

    vocab defaults to the byte tokenizer's full range; gradient-check tests
    shrink it and feed hand-picked token ids instead.
    """
    return ModelConfig(
        vision=VisionEncoderConfig(image_size=8, patch_size=4, width=8, depth=1,
                                   heads=2, embed_dim=4),
        text=TextEncoderConfig(vocab_size=vocab, max_length=6, width=8, depth=1,
                               heads=2, embed_dim=4),
        dino=DinoProjectorConfig(hidden_dim=8, bottleneck_dim=4, output_dim=k),
    )


def write_synthetic_manifest(path, n: int = 16, size: int = 32, languages=("en", "de"),
                             split: str = "train"):
    """n synthetic images with one distinct caption per language."""
    lines = []
    for i in range(n):
        captions = {}
        if "en" in languages:
            captions["en"] = [FIXTURE_CAPTIONS_EN[i % len(FIXTURE_CAPTIONS_EN)]]
        if "de" in languages:
            captions["de"] = [FIXTURE_CAPTIONS_DE[i % len(FIXTURE_CAPTIONS_DE)]]
        lines.append(json.dumps({"image": {"synthetic": {"seed": i, "size": size}},
                                 "captions": captions, "split": split}))
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    return path


@pytest.fixture
def synthetic_manifest(tmp_path):
    path = tmp_path / "manifest.jsonl"
    write_synthetic_manifest(path)
    return load_manifest(path)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
