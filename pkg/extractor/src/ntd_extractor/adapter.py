"""Feature extraction from labeled image folders into validated-store files.

The embedding of an input is the tensor feeding the model's final
classification layer (its "penultimate" representation), captured with a
forward pre-hook and flattened per sample. Models come from torchvision by
name; without a weights file the architecture is initialized from the
configured seed, which keeps every run of the pipeline bit-reproducible and
lets the adapter operate where pretrained weights cannot be downloaded.
Published weights are loaded from a local state_dict when provided.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from PIL import Image, UnidentifiedImageError

from . import ntdf
from .errors import DecodeError, IoError, ModelLoadError, ValidationError
from .preprocess import resize_and_crop, to_model_tensor

log = logging.getLogger(__name__)

# torchvision's published ImageNet preprocessing constants
IMAGENET_MEAN = (0.485, 0.456, 0.406)
IMAGENET_STD = (0.229, 0.224, 0.225)


def _as_size(value: int | tuple[int, int], label: str) -> tuple[int, int]:
    if isinstance(value, int):
        value = (value, value)
    w, h = value
    if w < 1 or h < 1:
        raise ValidationError(f"{label} must be positive, got {value}")
    return (int(w), int(h))


@dataclass(frozen=True)
class ExtractorConfig:
    """Model choice plus the preprocessing pipeline settings.

    layer selects the module whose *input* is the embedding; None means the
    last linear layer in the model. Sizes are (width, height) and accept a
    bare int for squares.
    """

    model: str = "resnet18"
    layer: str | None = None
    resize: int | tuple[int, int] = (40, 40)
    crop: int | tuple[int, int] = (32, 32)
    mean: tuple[float, float, float] = IMAGENET_MEAN
    std: tuple[float, float, float] = IMAGENET_STD
    seed: int = 0
    weights_path: str | None = None
    batch_size: int = 16

    def __post_init__(self) -> None:
        object.__setattr__(self, "resize", _as_size(self.resize, "resize"))
        object.__setattr__(self, "crop", _as_size(self.crop, "crop"))
        if self.crop[0] > self.resize[0] or self.crop[1] > self.resize[1]:
            raise ValidationError(
                f"crop {self.crop} exceeds resize {self.resize}"
            )
        if len(self.mean) != 3 or len(self.std) != 3:
            raise ValidationError("mean and std must have three channels")
        if any(s == 0 for s in self.std):
            raise ValidationError("std channels must be nonzero")
        if self.batch_size < 1:
            raise ValidationError(f"batch_size must be >= 1, got {self.batch_size}")

    def audit_comments(self) -> list[str]:
        """Manifest comment lines recording how the embeddings were made."""
        return [
            f"model={self.model} layer={self.layer or 'auto:last-linear'}",
            f"resize={self.resize[0]}x{self.resize[1]} "
            f"crop={self.crop[0]}x{self.crop[1]}",
            "mean=" + ",".join(repr(v) for v in self.mean),
            "std=" + ",".join(repr(v) for v in self.std),
            f"seed={self.seed} weights={self.weights_path or 'seeded-init'}",
        ]


def load_model(cfg: ExtractorConfig) -> torch.nn.Module:
    import torchvision.models

    torch.manual_seed(cfg.seed)
    try:
        model = torchvision.models.get_model(cfg.model, weights=None)
    except (ValueError, KeyError) as exc:
        raise ModelLoadError(f"unknown model {cfg.model!r}: {exc}") from exc
    if cfg.weights_path is not None:
        try:
            state = torch.load(cfg.weights_path, map_location="cpu",
                               weights_only=True)
            model.load_state_dict(state)
        except (OSError, RuntimeError) as exc:
            raise ModelLoadError(
                f"cannot load weights from {cfg.weights_path}: {exc}"
            ) from exc
    model.eval()
    return model


def _target_module(model: torch.nn.Module, layer: str | None) -> torch.nn.Module:
    if layer is not None:
        modules = dict(model.named_modules())
        if layer not in modules:
            raise ValidationError(
                f"model has no module named {layer!r}; "
                f"try one of {sorted(modules)[:8]}..."
            )
        return modules[layer]
    last = None
    for _, module in model.named_modules():
        if isinstance(module, torch.nn.Linear):
            last = module
    if last is None:
        raise ModelLoadError("model has no linear layer to anchor the embedding")
    return last


class FeatureExtractor:
    """A loaded model with a tap on its embedding layer.

    Keeps the model warm across calls; embed_batch is the only inference
    path, so single-image extraction and folder extraction share bitwise
    behavior for equal batch compositions.
    """

    def __init__(self, cfg: ExtractorConfig) -> None:
        self.cfg = cfg
        self.model = load_model(cfg)
        self._captured: torch.Tensor | None = None
        _target_module(self.model, cfg.layer).register_forward_pre_hook(
            self._capture
        )

    def _capture(self, module: torch.nn.Module, inputs: tuple) -> None:
        self._captured = inputs[0]

    def embed_batch(self, batch: torch.Tensor) -> np.ndarray:
        """(N, C, H, W) tensor to (N, dim) float32 embeddings."""
        self._captured = None
        with torch.no_grad():
            self.model(batch)
        if self._captured is None:
            raise ModelLoadError("embedding layer was never reached in forward")
        return (
            self._captured.reshape(batch.shape[0], -1)
            .to(torch.float32)
            .cpu()
            .numpy()
        )

    def embed_image(self, image: Image.Image) -> np.ndarray:
        tensor = to_model_tensor(
            resize_and_crop(image, self.cfg.resize, self.cfg.crop),
            self.cfg.mean,
            self.cfg.std,
        )
        return self.embed_batch(tensor.unsqueeze(0))[0]


def _decode(path: Path) -> Image.Image:
    try:
        with Image.open(path) as img:
            return img.convert("RGB")
    except (UnidentifiedImageError, OSError) as exc:
        raise DecodeError(f"cannot decode {path}: {exc}") from exc


def _batched(paths: Sequence[Path], size: int) -> Iterator[Sequence[Path]]:
    for start in range(0, len(paths), size):
        yield paths[start : start + size]


@dataclass
class ExtractionReport:
    records: int
    skipped: int
    dim: int
    classes: dict[int, str] = field(default_factory=dict)


def extract_folder(
    images_dir: str | Path,
    cfg: ExtractorConfig,
    out_path: str | Path,
    manifest_path: str | Path | None = None,
) -> ExtractionReport:
    """Embed every image under images_dir/<class_name>/* into a store file.

    Class ids follow the sorted order of the class directories. Images that
    fail to decode are skipped with a warning and counted in the report;
    everything else becomes one record. The emitted file satisfies the
    validated-store format, including its finiteness requirements.
    """
    root = Path(images_dir)
    try:
        class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    except OSError as exc:
        raise IoError(f"cannot list {root}: {exc}") from exc
    if not class_dirs:
        raise ValidationError(f"{root} has no class directories")
    extractor = FeatureExtractor(cfg)
    names: dict[int, str] = {}
    records: list[tuple[int, np.ndarray]] = []
    skipped = 0
    for class_id, class_dir in enumerate(class_dirs):
        names[class_id] = class_dir.name
        paths = sorted(p for p in class_dir.iterdir() if p.is_file())
        decoded: list[tuple[Path, Image.Image]] = []
        for path in paths:
            try:
                decoded.append((path, _decode(path)))
            except DecodeError as exc:
                skipped += 1
                log.warning("skipping undecodable image: %s", exc)
        for chunk_start in range(0, len(decoded), cfg.batch_size):
            chunk = decoded[chunk_start : chunk_start + cfg.batch_size]
            batch = torch.stack(
                [
                    to_model_tensor(
                        resize_and_crop(img, cfg.resize, cfg.crop),
                        cfg.mean,
                        cfg.std,
                    )
                    for _, img in chunk
                ]
            )
            for vector in extractor.embed_batch(batch):
                records.append((class_id, vector))
    if not records:
        raise ValidationError(f"no decodable images under {root}")
    dim = records[0][1].shape[0]
    ntdf.write_store(out_path, dim, records)
    if manifest_path is not None:
        ntdf.write_manifest(manifest_path, names, cfg.audit_comments())
    return ExtractionReport(
        records=len(records), skipped=skipped, dim=dim, classes=names
    )


def extract_one(
    image_path: str | Path, cfg: ExtractorConfig, input_id: str | None = None
) -> str:
    """Embed one image into a text line: input id, then the vector values.

    The line is what the batch-screening command and the service request
    format expect as an embedding payload.
    """
    path = Path(image_path)
    image = _decode(path)
    vector = FeatureExtractor(cfg).embed_image(image)
    name = input_id if input_id is not None else path.stem
    if not name:
        raise ValidationError("input id is empty")
    values = " ".join(format(float(v), ".17g") for v in vector)
    return f"{name} {values}"
