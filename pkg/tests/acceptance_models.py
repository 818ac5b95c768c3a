"""Recipes for the desk-scale models used by the acceptance suite.

Each model is trained through the CLI from a committed config. Run this file
directly to build every missing checkpoint; the acceptance tests call
:func:`ensure` and only train what is absent.
"""
from __future__ import annotations

import os
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
CONFIGS = ROOT / "configs"
ARTIFACTS = Path(os.environ.get("HDJSCC_ARTIFACTS", ROOT / "artifacts"))

# name -> (stage, pretrained dependency)
MODELS = {
    "desk_jscc": ("jscc", None),
    "desk_eta5_lam3200": ("hdjscc", "desk_jscc"),
    "desk_eta5_lam800": ("hdjscc", "desk_jscc"),
    "desk_eta5_lam200": ("hdjscc", "desk_jscc"),
    "desk_adaptive_pretrained": ("hdjscc", "desk_jscc"),
    "desk_adaptive_random": ("hdjscc", None),
}


def checkpoint_path(name: str) -> Path:
    return ARTIFACTS / f"{name}.ckpt"


def _complete(path: Path) -> bool:
    from hdjscc.checkpoint import decode_checkpoint

    # epoch snapshots of an interrupted run are marked incomplete
    return decode_checkpoint(path.read_bytes())["extra"].get("complete", True)


def ensure(name: str) -> Path:
    from hdjscc import cli

    path = checkpoint_path(name)
    if path.exists() and _complete(path):
        return path
    stage, dep = MODELS[name]
    args = ["-v", "train", "--config", str(CONFIGS / f"{name}.yaml"), "--stage", stage, "--out", str(path)]
    if dep is not None:
        args += ["--pretrained", str(ensure(dep))]
    if cli.main(args) != 0:
        raise RuntimeError(f"training {name} failed")
    return path


if __name__ == "__main__":
    for n in sys.argv[1:] or MODELS:
        print(n, ensure(n), flush=True)
