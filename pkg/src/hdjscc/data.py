"""Dataset ingestion into a local store of uint8 NHWC arrays.

Each dataset lives in ``<root>/<name>/`` with one ``.npy`` file per split
and a ``manifest.json`` recording shapes and sha256 digests. Ingestion is
idempotent: a store whose manifest verifies is left untouched.

Three sources are supported: the CIFAR-10 python pickles, a folder of
CelebA images (center-cropped and resized to 128x128) and a small "desk"
corpus of 32x32 patches cut from the colour images bundled with
scikit-image and scikit-learn, which needs no download.
"""
from __future__ import annotations

import hashlib
import json
import logging
import os
import pickle
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigurationError

log = logging.getLogger(__name__)

ENV_ROOT = "HDJSCC_DATA_ROOT"
SPLITS = ("train", "val", "test")
CIFAR_VAL = 5000

DESK_TRAIN_IMAGES = (
    "astronaut", "coffee", "rocket", "hubble_deep_field", "retina",
    "immunohistochemistry", "stereo_left", "stereo_right", "china",
)
DESK_TEST_IMAGES = ("chelsea", "flower")
DESK_SCALES = (1, 2, 4)
DESK_PATCH = 32


def data_root(root=None) -> Path:
    if root is not None:
        return Path(root)
    return Path(os.environ.get(ENV_ROOT, Path.home() / ".cache" / "hdjscc"))


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_store(dest: Path, splits: dict, extra: dict | None = None) -> dict:
    dest.mkdir(parents=True, exist_ok=True)
    manifest = {"splits": {}, **(extra or {})}
    for name, arr in splits.items():
        arr = np.ascontiguousarray(arr, dtype=np.uint8)
        path = dest / f"{name}.npy"
        np.save(path, arr)
        manifest["splits"][name] = {"shape": list(arr.shape), "sha256": _sha256(path)}
    with open(dest / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2)
    return manifest


def verify_store(dest: Path) -> list[str]:
    """Return a list of problems (empty when the store is intact)."""
    problems = []
    mpath = Path(dest) / "manifest.json"
    if not mpath.exists():
        return ["missing manifest"]
    manifest = json.loads(mpath.read_text())
    for name, info in manifest["splits"].items():
        path = Path(dest) / f"{name}.npy"
        if not path.exists():
            problems.append(f"{name}: missing file")
            continue
        if _sha256(path) != info["sha256"]:
            problems.append(f"{name}: checksum mismatch")
            continue
        shape = list(np.load(path, mmap_mode="r").shape)
        if shape != info["shape"]:
            problems.append(f"{name}: shape {shape} != {info['shape']}")
    return problems


def _already_ingested(dest: Path) -> bool:
    return (dest / "manifest.json").exists() and not verify_store(dest)


# --- CIFAR-10 ---------------------------------------------------------------

def _cifar_batch(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        d = pickle.load(f, encoding="bytes")
    return d[b"data"].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)


def ingest_cifar10(src, root=None, seed: int = 0) -> dict:
    """Ingest the CIFAR-10 python release (``cifar-10-batches-py``).

    The 50000 training images are split into 45000 train and 5000 val with a
    seeded permutation; the 10000 test images form the test split.
    """
    src = Path(src)
    if (src / "cifar-10-batches-py").is_dir():
        src = src / "cifar-10-batches-py"
    dest = data_root(root) / "cifar10"
    if _already_ingested(dest):
        log.info("cifar10 already ingested at %s", dest)
        return json.loads((dest / "manifest.json").read_text())
    files = [src / f"data_batch_{i}" for i in range(1, 6)] + [src / "test_batch"]
    missing = [str(p) for p in files if not p.exists()]
    if missing:
        raise ConfigurationError(f"CIFAR-10 files not found: {missing}")
    train = np.concatenate([_cifar_batch(p) for p in files[:5]])
    test = _cifar_batch(files[5])
    if train.shape != (50000, 32, 32, 3) or test.shape != (10000, 32, 32, 3):
        raise ConfigurationError(f"unexpected CIFAR-10 shapes {train.shape}, {test.shape}")
    perm = np.random.default_rng(seed).permutation(len(train))
    val_idx, train_idx = perm[:CIFAR_VAL], perm[CIFAR_VAL:]
    return _write_store(dest, {"train": train[train_idx], "val": train[val_idx], "test": test},
                        {"dataset": "cifar10", "seed": seed})


# --- CelebA -----------------------------------------------------------------

def center_crop_resize(img: np.ndarray, size: int) -> np.ndarray:
    from PIL import Image

    h, w = img.shape[:2]
    s = min(h, w)
    top, left = (h - s) // 2, (w - s) // 2
    crop = Image.fromarray(img[top:top + s, left:left + s])
    return np.asarray(crop.resize((size, size), Image.BICUBIC))


def ingest_celeba(src, root=None, size: int = 128, seed: int = 0) -> dict:
    """Ingest a folder of CelebA images. Uses ``list_eval_partition.txt`` when
    present, otherwise an 80/10/10 seeded split. Unreadable files are skipped
    and listed in the manifest under ``errors``.
    """
    from PIL import Image

    src = Path(src)
    dest = data_root(root) / "celeba"
    if _already_ingested(dest):
        return json.loads((dest / "manifest.json").read_text())
    img_dir = src / "img_align_celeba" if (src / "img_align_celeba").is_dir() else src
    names = sorted(p.name for p in img_dir.iterdir() if p.suffix.lower() in (".jpg", ".jpeg", ".png"))
    if not names:
        raise ConfigurationError(f"no images found under {img_dir}")
    part_file = src / "list_eval_partition.txt"
    if part_file.exists():
        part = dict(line.split() for line in part_file.read_text().splitlines() if line.strip())
        assign = {n: SPLITS[int(part.get(n, 0))] for n in names}
    else:
        perm = np.random.default_rng(seed).permutation(len(names))
        n_tr, n_va = int(0.8 * len(names)), int(0.1 * len(names))
        assign = {}
        for rank, i in enumerate(perm):
            assign[names[i]] = "train" if rank < n_tr else "val" if rank < n_tr + n_va else "test"
    out = {s: [] for s in SPLITS}
    errors = []
    for n in names:
        try:
            img = np.asarray(Image.open(img_dir / n).convert("RGB"))
            out[assign[n]].append(center_crop_resize(img, size))
        except Exception as e:  # reported per file, ingestion continues
            errors.append(f"{n}: {e}")
            log.warning("skipping %s: %s", n, e)
    arrays = {s: np.stack(v) if v else np.zeros((0, size, size, 3), np.uint8) for s, v in out.items()}
    return _write_store(dest, arrays, {"dataset": "celeba", "size": size, "errors": errors})


# --- desk corpus ------------------------------------------------------------

def _bundled_image(name: str) -> np.ndarray:
    import skimage.data as skd

    if name in ("china", "flower"):
        from sklearn.datasets import load_sample_image

        return load_sample_image(f"{name}.jpg")
    if name in ("stereo_left", "stereo_right"):
        left, right, _ = skd.stereo_motorcycle()
        return left if name == "stereo_left" else right
    return getattr(skd, name)()[..., :3]


def downscale(img: np.ndarray, factor: int) -> np.ndarray:
    """Box-filter downscaling by an integer factor."""
    if factor == 1:
        return img
    h, w = (img.shape[0] // factor) * factor, (img.shape[1] // factor) * factor
    x = img[:h, :w].astype(np.float64).reshape(h // factor, factor, w // factor, factor, 3)
    return np.round(x.mean(axis=(1, 3))).astype(np.uint8)


def grid_patches(img: np.ndarray, size: int, stride: int) -> np.ndarray:
    h, w = img.shape[:2]
    out = [img[i:i + size, j:j + size]
           for i in range(0, h - size + 1, stride) for j in range(0, w - size + 1, stride)]
    return np.stack(out)


def random_patches(imgs, n: int, size: int, rng: np.random.Generator) -> np.ndarray:
    out = np.empty((n, size, size, 3), np.uint8)
    which = rng.integers(len(imgs), size=n)
    for t, i in enumerate(which):
        img = imgs[i]
        r = rng.integers(img.shape[0] - size + 1)
        c = rng.integers(img.shape[1] - size + 1)
        p = img[r:r + size, c:c + size]
        if rng.random() < 0.5:
            p = p[:, ::-1]
        out[t] = p
    return out


def ingest_desk(root=None, n_train: int = 50000, n_val: int = 2000, seed: int = 0) -> dict:
    """Build the bundled-image patch corpus.

    Train/val patches are random crops (with horizontal flips) of the train
    images at several box-downscales; test patches are a stride-16 grid over
    held-out images at scales 1 and 2.
    """
    dest = data_root(root) / "desk"
    if _already_ingested(dest):
        return json.loads((dest / "manifest.json").read_text())
    rng = np.random.default_rng(seed)
    pool = [downscale(_bundled_image(n), s) for n in DESK_TRAIN_IMAGES for s in DESK_SCALES]
    pool = [p for p in pool if min(p.shape[:2]) >= DESK_PATCH]
    train = random_patches(pool, n_train, DESK_PATCH, rng)
    val = random_patches(pool, n_val, DESK_PATCH, rng)
    test = np.concatenate([
        grid_patches(downscale(_bundled_image(n), s), DESK_PATCH, 16)
        for n in DESK_TEST_IMAGES for s in (1, 2)
    ])
    return _write_store(dest, {"train": train, "val": val, "test": test},
                        {"dataset": "desk", "seed": seed,
                         "train_images": list(DESK_TRAIN_IMAGES), "test_images": list(DESK_TEST_IMAGES)})


INGESTERS = {"cifar10": ingest_cifar10, "celeba": ingest_celeba, "desk": ingest_desk}


def load_split(name: str, split: str, root=None) -> np.ndarray:
    """Load one split as uint8 NHWC; the desk corpus is built on demand."""
    dest = data_root(root) / name
    if not (dest / "manifest.json").exists():
        if name != "desk":
            raise ConfigurationError(f"dataset {name!r} not ingested under {dest.parent}; run `hdjscc ingest`")
        ingest_desk(root)
    return np.load(dest / f"{split}.npy")


def to_tensor(batch: np.ndarray, dtype=torch.float32) -> torch.Tensor:
    """uint8 NHWC -> float NCHW in [0, 1]."""
    return torch.from_numpy(np.ascontiguousarray(batch.transpose(0, 3, 1, 2))).to(dtype) / 255.0


def iterate_batches(images: np.ndarray, batch_size: int, rng: np.random.Generator | None = None,
                    drop_last: bool = True):
    """Yield float tensors; shuffled (with random flips) when ``rng`` is given."""
    n = len(images)
    order = rng.permutation(n) if rng is not None else np.arange(n)
    stop = n - batch_size + 1 if drop_last else n
    for i in range(0, max(stop, 0), batch_size):
        batch = images[order[i:i + batch_size]]
        if rng is not None:
            flip = rng.random(len(batch)) < 0.5
            batch = batch.copy()
            batch[flip] = batch[flip, :, ::-1]
        yield to_tensor(batch)


def mean_image(images: np.ndarray) -> torch.Tensor:
    """Dataset-mean image (C, H, W) in [0, 1]."""
    return torch.from_numpy(images.mean(axis=0).transpose(2, 0, 1) / 255.0).float()
