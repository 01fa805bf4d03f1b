#!/usr/bin/env python3
"""Prepare the datasets used by wmlab under a data root.

Layout written:
  cifar10/train, cifar10/test   32x32x3, 10 classes
  mnist/train                   28x28x1, 10 classes
  ood/                          32x32x3 crops of natural images (proxy pool)

Each dataset directory holds images.wmt (packed u8 tensor, N x H x W x C) and
meta.json. CIFAR-10 and MNIST come from npm packages (tfjs-cifar10, mnist);
the OOD pool is cut from the sample images shipped with scikit-image and
scikit-learn.
"""

import argparse
import hashlib
import json
import os
import struct
import subprocess
import sys
import tarfile
from pathlib import Path

import numpy as np
from PIL import Image

CIFAR_PACKAGE = "tfjs-cifar10@1.1.1"
MNIST_PACKAGE = "mnist@1.1.0"
OOD_SIZE = 32


def write_packed(path, array):
    array = np.ascontiguousarray(array, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(b"WMTN")
        f.write(struct.pack("<III", 1, 0, array.ndim))
        f.write(struct.pack("<%dQ" % array.ndim, *array.shape))
        f.write(array.tobytes())


def write_dataset(root, name, split, images, labels, num_classes, provenance, labels_ignored=False):
    root.mkdir(parents=True, exist_ok=True)
    write_packed(root / "images.wmt", images)
    meta = {
        "name": name,
        "split": split,
        "shape": list(images.shape[1:]),
        "num_classes": num_classes,
        "labels": [int(v) for v in labels],
        "labels_ignored": labels_ignored,
        "provenance": provenance,
        "seed": 0,
        "spec_hash": "",
    }
    (root / "meta.json").write_text(json.dumps(meta) + "\n")
    print(f"  {root}: {images.shape[0]} images {images.shape[1:]}")


def npm_package(spec, cache):
    cache.mkdir(parents=True, exist_ok=True)
    stem = spec.split("@")[0]
    unpacked = cache / stem
    if (unpacked / "package").exists():
        return unpacked / "package"
    tarballs = sorted(cache.glob(f"{stem}-*.tgz"))
    if not tarballs:
        subprocess.run(["npm", "pack", spec, "--silent"], cwd=cache, check=True, stdout=subprocess.DEVNULL)
        tarballs = sorted(cache.glob(f"{stem}-*.tgz"))
    with tarfile.open(tarballs[-1]) as tar:
        tar.extractall(unpacked)
    return unpacked / "package"


def prepare_cifar10(out, cache):
    pkg = npm_package(CIFAR_PACKAGE, cache)

    def batch(name):
        rows = np.asarray(Image.open(pkg / name).convert("RGB"), dtype=np.uint8)
        return rows.reshape(-1, 32, 32, 3)

    train = np.concatenate([batch(f"data_batch_{i}.png") for i in range(1, 6)])
    train_labels = json.loads((pkg / "train_lables.json").read_text())
    test = batch("test_batch.png")
    test_labels = json.loads((pkg / "test_lables.json").read_text())
    assert len(train) == len(train_labels) == 50000 and len(test) == len(test_labels) == 10000
    write_dataset(out / "cifar10" / "train", "cifar10", "train", train, train_labels, 10, "npm:" + CIFAR_PACKAGE)
    write_dataset(out / "cifar10" / "test", "cifar10", "test", test, test_labels, 10, "npm:" + CIFAR_PACKAGE)


def prepare_mnist(out, cache):
    pkg = npm_package(MNIST_PACKAGE, cache)
    images, labels = [], []
    for digit in range(10):
        data = np.asarray(json.loads((pkg / "src" / "digits" / f"{digit}.json").read_text())["data"], dtype=np.float32)
        data = data.reshape(-1, 28, 28, 1)
        images.append(np.rint(np.clip(data, 0, 1) * 255).astype(np.uint8))
        labels += [digit] * len(data)
    write_dataset(out / "mnist" / "train", "mnist", "train", np.concatenate(images), labels, 10, "npm:" + MNIST_PACKAGE)


def ood_sources():
    import skimage.data as sd
    from sklearn.datasets import load_sample_images

    color = ["astronaut", "chelsea", "coffee", "rocket", "hubble_deep_field", "immunohistochemistry", "retina", "colorwheel", "cat"]
    gray = ["camera", "brick", "grass", "gravel", "moon", "coins", "clock", "cell"]
    out = []
    for name in color + gray:
        loader = getattr(sd, name, None)
        if loader is None:
            continue
        img = np.asarray(loader())
        if img.ndim == 2:
            img = np.repeat(img[:, :, None], 3, axis=2)
        img = img[:, :, :3]
        if img.dtype != np.uint8:
            img = np.rint(255 * (img.astype(np.float64) - img.min()) / max(1e-12, np.ptp(img))).astype(np.uint8)
        out.append((name, img))
    for i, img in enumerate(load_sample_images().images):
        out.append((f"sklearn{i}", np.asarray(img, dtype=np.uint8)))
    return out


def prepare_ood(out, count, seed):
    rng = np.random.default_rng(seed)
    sources = ood_sources()
    crops, seen = [], set()
    while len(crops) < count:
        name, img = sources[rng.integers(len(sources))]
        h, w = img.shape[:2]
        side = int(rng.integers(OOD_SIZE, max(OOD_SIZE + 1, min(h, w) // 3)))
        y, x = int(rng.integers(0, h - side + 1)), int(rng.integers(0, w - side + 1))
        patch = Image.fromarray(img[y : y + side, x : x + side]).resize((OOD_SIZE, OOD_SIZE), Image.BILINEAR)
        if rng.random() < 0.5:
            patch = patch.transpose(Image.FLIP_LEFT_RIGHT)
        arr = np.asarray(patch, dtype=np.uint8)
        key = hashlib.sha1(arr.tobytes()).hexdigest()
        if key in seen or arr.std() < 4:
            continue
        seen.add(key)
        crops.append(arr)
    names = ",".join(n for n, _ in sources)
    write_dataset(out / "ood", "ood", "proxy", np.stack(crops), [0] * count, 0, "crops:" + names, labels_ignored=True)


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--out", default=os.environ.get("WMLAB_DATA", "data"), help="data root to populate")
    ap.add_argument("--cache", default=os.path.join(os.environ.get("TMPDIR", "/tmp"), "wmlab-fetch"), help="download cache")
    ap.add_argument("--ood-count", type=int, default=5000)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--force", action="store_true", help="rebuild datasets that already exist")
    args = ap.parse_args()

    out, cache = Path(args.out), Path(args.cache)
    steps = [
        (out / "cifar10" / "test" / "meta.json", lambda: prepare_cifar10(out, cache)),
        (out / "mnist" / "train" / "meta.json", lambda: prepare_mnist(out, cache)),
        (out / "ood" / "meta.json", lambda: prepare_ood(out, args.ood_count, args.seed)),
    ]
    for marker, step in steps:
        if marker.exists() and not args.force:
            print(f"  {marker.parent}: present")
            continue
        step()
    return 0


if __name__ == "__main__":
    sys.exit(main())
