"""External weight assets (pretrained feature extractors) resolved at runtime.

Pretrained weights are not bundled and are never downloaded implicitly; they
are looked up in the directory named by the POINTRENDER_ASSETS environment
variable. A checksums.json file there (name -> sha256 hex) enables integrity
verification when present.
"""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path

from .errors import AssetError

ASSETS_ENV = "POINTRENDER_ASSETS"

_CREATE_INSTRUCTIONS = {
    "vgg19_features.pt": (
        'python -c "import torch; from torchvision.models import vgg19, VGG19_Weights; '
        "torch.save(vgg19(weights=VGG19_Weights.IMAGENET1K_V1).features.state_dict(), "
        "'vgg19_features.pt')\""
    ),
    "lpips_vgg.pt": (
        'python -c "import torch, lpips; m = lpips.LPIPS(net=\'vgg\'); '
        "torch.save({'features': m.net.state_dict(), "
        "'lins': [l.model[-1].weight.detach() for l in m.lins]}, 'lpips_vgg.pt')\""
    ),
}


def asset_dir() -> Path | None:
    raw = os.environ.get(ASSETS_ENV)
    return Path(raw) if raw else None


def asset_path(name: str) -> Path:
    """Resolve an asset by name, verifying its checksum when one is declared."""
    base = asset_dir()
    hint = _CREATE_INSTRUCTIONS.get(name)
    hint_text = (f" To create it on a machine with internet access:\n  {hint}\n"
                 f"then copy it into that directory." if hint else "")
    if base is None:
        raise AssetError(
            f"asset {name} unavailable: set {ASSETS_ENV} to a directory containing "
            f"it.{hint_text}")
    path = base / name
    if not path.exists():
        raise AssetError(f"asset {name} not found in {base}.{hint_text}")
    _verify_checksum(base, name, path)
    return path


def _verify_checksum(base: Path, name: str, path: Path) -> None:
    manifest = base / "checksums.json"
    if not manifest.exists():
        return
    try:
        declared = json.loads(manifest.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise AssetError(f"unreadable checksum manifest {manifest}: {e}") from e
    if name not in declared:
        return
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    if digest != declared[name]:
        raise AssetError(
            f"asset {name} failed checksum verification "
            f"(expected {declared[name]}, got {digest})")
