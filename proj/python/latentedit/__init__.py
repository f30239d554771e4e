"""Latent-space 3D scene editing: field training, camera alignment and masked edits."""

from latentedit._core import (
    ConfigError,
    Editor,
    LatenteditError,
    Scene,
    blend_masked,
    default_config,
    edit_psnr,
    load_config,
    split_prompt,
    threshold_mask,
)

__all__ = [
    "ConfigError",
    "Editor",
    "LatenteditError",
    "Scene",
    "blend_masked",
    "default_config",
    "edit_psnr",
    "load_config",
    "split_prompt",
    "threshold_mask",
]
