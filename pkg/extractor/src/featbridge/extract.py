"""Run a frozen torchvision backbone over a manifest and export embeddings.

Tap points are module names inside the backbone; their forward outputs
become the per-image scales. Defaults pick the two mid-depth residual
stages, which carry enough spatial resolution for patch-level scoring
while staying cheap to store. Inference is eval-mode and gradient-free,
so identical inputs give identical records.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .wire import ManifestEntry, load_manifest, write_embeddings

# standard ImageNet statistics; harmless for randomly initialized weights
_CHANNEL_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_CHANNEL_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class ExtractorConfig:
    backbone: str = "resnet50"
    taps: tuple[str, ...] = ("layer2", "layer3")
    image_size: int = 224
    out_path: str = "embeddings.bin"
    batch_size: int = 8
    weights: str = "default"  # "default" = pretrained, "random" = seeded init
    init_seed: int = 0
    skip_log: str | None = None  # default: out_path + ".skipped"

    def __post_init__(self) -> None:
        if len(self.taps) < 2:
            raise ConfigError("need at least two tap points")
        if len(set(self.taps)) != len(self.taps):
            raise ConfigError("tap points must be distinct")
        if self.image_size < 32:
            raise ConfigError(f"image_size must be >= 32, got {self.image_size}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.weights not in ("default", "random"):
            raise ConfigError(f"weights must be 'default' or 'random', got {self.weights!r}")

    @property
    def skip_log_path(self) -> str:
        return self.skip_log if self.skip_log is not None else self.out_path + ".skipped"


@dataclass
class ExtractResult:
    out_path: str
    written_ids: list[int]
    skipped: list[tuple[int, str, str]] = field(default_factory=list)  # (id, path, reason)


class _TapRunner:
    """Backbone wrapped with forward hooks on the configured tap modules."""

    def __init__(self, cfg: ExtractorConfig):
        import torch
        from torchvision.models import get_model

        self._torch = torch
        try:
            if cfg.weights == "random":
                torch.manual_seed(cfg.init_seed)
                model = get_model(cfg.backbone, weights=None)
            else:
                model = get_model(cfg.backbone, weights="DEFAULT")
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"cannot build backbone {cfg.backbone!r}: {exc}") from exc
        model.eval()
        for p in model.parameters():
            p.requires_grad_(False)

        named = dict(model.named_modules())
        missing = [t for t in cfg.taps if t not in named]
        if missing:
            raise ConfigError(f"backbone {cfg.backbone!r} has no module(s) {missing}")
        self._model = model
        self._taps = cfg.taps
        self._captured: dict[str, "torch.Tensor"] = {}
        for name in cfg.taps:
            named[name].register_forward_hook(self._make_hook(name))

    def _make_hook(self, name: str):
        def hook(_module, _inputs, output):
            self._captured[name] = output

        return hook

    def forward(self, batch: np.ndarray) -> list[np.ndarray]:
        """(B,3,S,S) float32 -> per-tap (B,C,H,W) float32 arrays."""
        torch = self._torch
        self._captured.clear()
        with torch.no_grad():
            self._model(torch.from_numpy(batch))
        out = []
        for name in self._taps:
            if name not in self._captured:
                raise ConfigError(f"tap {name!r} produced no output (module never ran)")
            out.append(self._captured[name].numpy().astype(np.float32, copy=False))
        return out


def load_image(path, size: int) -> np.ndarray:
    """Image file -> normalized (3,S,S) float32; raises DataError if unreadable."""
    from PIL import Image

    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"cannot load image {path}: {exc}") from exc
    arr = (arr - _CHANNEL_MEAN) / _CHANNEL_STD
    return np.ascontiguousarray(arr.transpose(2, 0, 1))


def _write_skip_log(path, skipped: list[tuple[int, str, str]]) -> None:
    lines = ["id,path,reason"]
    lines += [f"{i},{p},{reason}" for i, p, reason in skipped]
    Path(path).write_text("\n".join(lines) + "\n")


def extract(manifest_path, cfg: ExtractorConfig,
            entries: Sequence[ManifestEntry] | None = None) -> ExtractResult:
    """Embed every readable manifest image and write one embedding file.

    Unreadable images are recorded in the skip log and the run continues;
    all other ids appear in the output with one record each.
    """
    if entries is None:
        entries = load_manifest(manifest_path)
    runner = _TapRunner(cfg)

    features_by_id: dict[int, tuple[np.ndarray, ...]] = {}
    skipped: list[tuple[int, str, str]] = []
    batch_entries: list[ManifestEntry] = []
    batch_arrays: list[np.ndarray] = []

    def flush() -> None:
        if not batch_entries:
            return
        stage_outputs = runner.forward(np.stack(batch_arrays))
        for j, entry in enumerate(batch_entries):
            features_by_id[entry.id] = tuple(stage[j] for stage in stage_outputs)
        batch_entries.clear()
        batch_arrays.clear()

    for entry in entries:
        try:
            arr = load_image(entry.path, cfg.image_size)
        except DataError as exc:
            skipped.append((entry.id, entry.path, str(exc)))
            continue
        batch_entries.append(entry)
        batch_arrays.append(arr)
        if len(batch_entries) == cfg.batch_size:
            flush()
    flush()

    if not features_by_id:
        raise DataError("no readable images in manifest")
    Path(cfg.out_path).parent.mkdir(parents=True, exist_ok=True)
    write_embeddings(features_by_id, cfg.out_path)
    _write_skip_log(cfg.skip_log_path, skipped)
    return ExtractResult(out_path=cfg.out_path,
                         written_ids=sorted(features_by_id),
                         skipped=skipped)
