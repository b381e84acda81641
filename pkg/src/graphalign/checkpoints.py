"""
Checkpoints Module

Versioned torch checkpoints for the encoder and the energy models. Each file
records its kind, the config it was built with (and that config's digest), the
training step and free-form provenance such as the frozen encoder digest.
"""

import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Optional, Union

import torch
import torch.nn as nn

from .dataset_io import config_digest, config_to_dict
from .errors import DatasetFormatError, DatasetVersionError, DigestMismatchError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


def module_digest(module: nn.Module) -> str:
    """sha256 over a module's state dict (names, shapes and raw parameter bytes)."""
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        t = tensor.detach().cpu().contiguous()
        h.update(name.encode("utf-8"))
        h.update(str(tuple(t.shape)).encode("utf-8"))
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def save_checkpoint(
    path: Union[str, Path],
    kind: str,
    config: Any,
    modules: Dict[str, nn.Module],
    step: int = 0,
    extra: Optional[Dict[str, Any]] = None,
) -> Path:
    """Write ``modules`` with their config and provenance to ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "config": config_to_dict(config),
        "config_digest": config_digest(config),
        "step": int(step),
        "state": {name: m.state_dict() for name, m in modules.items()},
        "extra": dict(extra or {}),
    }
    torch.save(payload, path)
    logger.debug("saved %s checkpoint (step %d) to %s", kind, step, path)
    return path


def load_checkpoint(
    path: Union[str, Path],
    kind: str,
    expected_config: Optional[Any] = None,
) -> Dict[str, Any]:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Args:
        path: Checkpoint file.
        kind: Expected kind (``"encoder"``, ``"energy-rotation"`` ...).
        expected_config: When given, the stored config digest must match it.

    Returns:
        The raw payload dictionary.

    Raises:
        DatasetVersionError: Unsupported version or wrong kind.
        DigestMismatchError: Config digest differs from ``expected_config``.
        DatasetFormatError: The file is not a readable checkpoint.
    """
    path = Path(path)
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DatasetFormatError(f"{path}: unreadable checkpoint ({exc})") from exc
    if not isinstance(payload, dict) or payload.get("format_version") != CHECKPOINT_VERSION:
        raise DatasetVersionError(f"{path}: unsupported checkpoint version")
    if payload.get("kind") != kind:
        raise DatasetVersionError(f"{path}: expected a '{kind}' checkpoint, found '{payload.get('kind')}'")
    if expected_config is not None and payload["config_digest"] != config_digest(expected_config):
        raise DigestMismatchError(f"{path}: checkpoint config digest does not match the requested config")
    return payload
