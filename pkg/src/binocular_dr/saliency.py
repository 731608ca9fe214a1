"""Grad-CAM saliency and side-by-side left/right export."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from torch import nn

from .core import EyeImageRecord, PatientPair, check_grade
from .model import Checkpoint, load_checkpoint
from .pipeline import AugmentConfig, ImageStore, eval_transform

OVERLAY_ALPHA = 0.4
OVERLAY_CMAP = "jet"


class LayerError(ValueError):
    pass


@dataclass
class SaliencyMap:
    values: np.ndarray
    target_layer: str
    target_class: int
    predicted_class: int
    source_record: EyeImageRecord | None = None


def normalize_map(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; an all-zero map stays all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    hi, lo = raw.max(), raw.min()
    if hi <= 0:
        return np.zeros_like(raw)
    if hi == lo:
        return np.ones_like(raw)
    return (raw - lo) / (hi - lo)


def _find_layer(model: nn.Module, name: str) -> nn.Module:
    modules = dict(model.named_modules())
    if name not in modules or name == "":
        raise LayerError(f"layer {name!r} not found; available: {', '.join(n for n in modules if n)}")
    return modules[name]


def _logits(output):
    return output[1] if isinstance(output, tuple) else output


def grad_cam(model: nn.Module, image, target_class: int | None = None, target_layer: str | None = None,
             record: EyeImageRecord | None = None) -> SaliencyMap:
    """Grad-CAM map at the spatial resolution of ``target_layer``.

    Channel weights are the spatial mean of d logit[target] / d activation;
    the map is ReLU of the weighted channel sum, min-max normalized.
    ``target_class`` defaults to the predicted class and ``target_layer`` to
    the model's ``default_cam_layer``.
    """
    layer_name = target_layer or getattr(model, "default_cam_layer", "")
    layer = _find_layer(model, layer_name)
    x = torch.as_tensor(image)
    if x.ndim == 3:
        x = x[None]
    x = x.to(next(model.parameters()).dtype)

    captured = {}

    def hook(_module, _inp, out):
        captured["act"] = out

    was_training = model.training
    model.eval()
    handle = layer.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            logits = _logits(model(x))
            act = captured.get("act")
            if act is None or not isinstance(act, torch.Tensor) or act.ndim != 4:
                shape = None if act is None else tuple(getattr(act, "shape", ()))
                raise LayerError(f"layer {layer_name!r} output has no spatial dims (shape {shape})")
            predicted = int(logits[0].argmax())
            cls = predicted if target_class is None else check_grade(target_class)
            (grad,) = torch.autograd.grad(logits[0, cls], act, allow_unused=True)
    finally:
        handle.remove()
        model.train(was_training)
    if grad is None:
        grad = torch.zeros_like(act)
    alpha = grad[0].mean(dim=(1, 2))
    cam = torch.relu((alpha[:, None, None] * act[0]).sum(dim=0))
    values = normalize_map(cam.detach().double().numpy())
    return SaliencyMap(values, layer_name, cls, predicted, record)


def upsample(values: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of a 2-D map to ``size`` (int or (H, W)); presentation only."""
    if isinstance(size, int):
        size = (size, size)
    t = torch.as_tensor(values, dtype=torch.float64)[None, None]
    out = F.interpolate(t, size=tuple(size), mode="bilinear", align_corners=False)[0, 0].numpy()
    return np.clip(out, 0.0, 1.0)


def _preprocess(ckpt: Checkpoint):
    from .trainer import preprocess_config

    return preprocess_config(ckpt.preprocess)


def pair_saliency_maps(checkpoint, pair: PatientPair, load=None, target_class=None, target_layer=None):
    """Grad-CAM maps and display images for both eyes of one patient."""
    ckpt = checkpoint if isinstance(checkpoint, Checkpoint) else load_checkpoint(checkpoint)
    prep = _preprocess(ckpt)
    load = load or ImageStore()
    out = []
    for record in (pair.left, pair.right):
        raw = load(record)
        x = eval_transform(raw, prep)
        smap = grad_cam(ckpt.backbone, x, target_class, target_layer, record)
        display = eval_transform(raw, AugmentConfig(0, 0, 0, prep.target_size)).permute(1, 2, 0).numpy()
        out.append((smap, np.clip(display, 0, 1)))
    return out


def _heat_rgb(values: np.ndarray) -> np.ndarray:
    from matplotlib import colormaps

    return colormaps[OVERLAY_CMAP](values)[..., :3]


def export_pair_saliency(checkpoint, pair: PatientPair, out_dir, load=None, target_class=None,
                         target_layer=None) -> list[Path]:
    """Write ``saliency/{patient}.png`` (composite) plus one raw heatmap PNG per eye.

    The composite stacks left (top) and right (bottom); columns hold the
    original image and the alpha-blended heatmap, titled with true and
    predicted grades.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_dir = Path(out_dir) / "saliency"
    out_dir.mkdir(parents=True, exist_ok=True)
    maps = pair_saliency_maps(checkpoint, pair, load, target_class, target_layer)
    pid = pair.patient_id
    paths = []
    fig, axes = plt.subplots(2, 2, figsize=(6, 6))
    for row, (side, (smap, display)) in enumerate(zip(("left", "right"), maps)):
        heat = upsample(smap.values, display.shape[:2])
        raw_path = out_dir / f"{pid}_{side}_heatmap.png"
        Image.fromarray(np.round(heat * 255).astype(np.uint8)).save(raw_path)
        paths.append(raw_path)
        overlay = (1 - OVERLAY_ALPHA) * display + OVERLAY_ALPHA * _heat_rgb(heat)
        axes[row, 0].imshow(display)
        axes[row, 0].set_title(f"{side} eye, grade {smap.source_record.grade}", fontsize=9)
        axes[row, 1].imshow(np.clip(overlay, 0, 1))
        axes[row, 1].set_title(f"predicted {smap.predicted_class} (class {smap.target_class} map)", fontsize=9)
        for ax in axes[row]:
            ax.axis("off")
    fig.suptitle(f"patient {pid}")
    fig.tight_layout()
    composite = out_dir / f"{pid}.png"
    fig.savefig(composite, dpi=100)
    plt.close(fig)
    return [composite] + paths
