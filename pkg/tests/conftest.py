"""Shared fixtures: MNIST arrays, session-cached trained baselines, and
synthetic IDX writers for hermetic loader/harness tests.

Trained models are cached under tests/_cache keyed by their full training
recipe, so the first run pays the training cost once and later runs reuse
the artifact. Training is deterministic, so a cache hit and a fresh train
produce bit-identical models.
"""

from __future__ import annotations

import gzip
import struct
from pathlib import Path

import numpy as np
import pytest

from axdnn import data, quant, train as train_mod
from axdnn.model import build_preset
from axdnn.modelio import load_model, save_model

REPO = Path(__file__).resolve().parent.parent
DATA = REPO / "data" / "mnist"
CACHE = Path(__file__).resolve().parent / "_cache"

MNIST_FILES = {
    "train_images": DATA / "train-images-idx3-ubyte.gz",
    "train_labels": DATA / "train-labels-idx1-ubyte.gz",
    "test_images": DATA / "t10k-images-idx3-ubyte.gz",
    "test_labels": DATA / "t10k-labels-idx1-ubyte.gz",
}


# ---------------------------------------------------------------------------
# synthetic IDX / CIFAR builders (used by loader, harness, and CLI tests)

def write_idx_images(path, pixels: np.ndarray, compress: bool = False) -> None:
    """Write a uint8 (N, rows, cols) array as an IDX3 image file."""
    n, rows, cols = pixels.shape
    blob = struct.pack(">IIII", 0x803, n, rows, cols) + pixels.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(blob)


def write_idx_labels(path, labels: np.ndarray, compress: bool = False) -> None:
    """Write a uint8 (N,) array as an IDX1 label file."""
    blob = struct.pack(">II", 0x801, labels.shape[0]) + labels.astype(np.uint8).tobytes()
    opener = gzip.open if compress else open
    with opener(path, "wb") as fh:
        fh.write(blob)


def write_cifar_batch(path, pixels: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 (N, 3, 32, 32) pixels + (N,) labels as one CIFAR-10 batch."""
    records = bytearray()
    for img, lab in zip(pixels, labels):
        records.append(int(lab))
        records.extend(img.astype(np.uint8).tobytes())
    Path(path).write_bytes(bytes(records))


# ---------------------------------------------------------------------------
# a tiny synthetic problem shared by the harness and CLI tests

def quadrant_images(rng: np.random.Generator, n: int):
    """Class c lights up one 2x2 quadrant of a 4x4 image; the rest is jitter."""
    corners = {0: (0, 0), 1: (0, 2), 2: (2, 0)}
    labels = (np.arange(n) % 3).astype(np.uint8)
    pixels = rng.integers(0, 40, size=(n, 4, 4)).astype(np.uint8)
    for i, lab in enumerate(labels):
        r, c = corners[int(lab)]
        pixels[i, r:r + 2, c:c + 2] = rng.integers(180, 256, size=(2, 2))
    return pixels, labels


@pytest.fixture(scope="session")
def toy_problem(tmp_path_factory):
    """Synthetic IDX data plus two small trained float models on disk."""
    from axdnn.model import Conv2D, Dense, Flatten, ModelSpec, ReLU
    from axdnn import train as train_mod

    root = tmp_path_factory.mktemp("toy_problem")
    rng = np.random.default_rng(1234)
    train_px, train_y = quadrant_images(rng, 48)
    test_px, test_y = quadrant_images(rng, 24)
    write_idx_images(root / "train-img", train_px)
    write_idx_labels(root / "train-lab", train_y)
    write_idx_images(root / "test-img", test_px)
    write_idx_labels(root / "test-lab", test_y)
    # a same-pixels/different-label pair: no model can score 100% on it
    conflict = np.stack([test_px[0], test_px[0]])
    write_idx_images(root / "conflict-img", conflict)
    write_idx_labels(root / "conflict-lab", np.array([0, 1], dtype=np.uint8))

    tcfg = train_mod.TrainConfig(epochs=4, batch_size=16, lr=0.1, momentum=0.9,
                                 seed=7)
    images = train_px[:, None].astype(np.float64) / 255.0
    dense_spec = ModelSpec("toydense", (1, 4, 4), (Flatten(), Dense(3)))
    save_model(train_mod.train(dense_spec, images, train_y, tcfg).model,
               root / "toydense.axm")
    conv_spec = ModelSpec("toyconv", (1, 4, 4),
                          (Conv2D(2, 3), ReLU(), Flatten(), Dense(3)))
    save_model(train_mod.train(conv_spec, images, train_y, tcfg).model,
               root / "toyconv.axm")
    return root


# ---------------------------------------------------------------------------
# datasets

@pytest.fixture(scope="session")
def mnist_raw():
    """Native 28x28 MNIST train/test Datasets."""
    train = data.load_mnist(MNIST_FILES["train_images"], MNIST_FILES["train_labels"])
    test = data.load_mnist(MNIST_FILES["test_images"], MNIST_FILES["test_labels"])
    return {"train": train, "test": test}


@pytest.fixture(scope="session")
def mnist32(mnist_raw):
    """MNIST zero-padded to the 32x32 lenet5 input."""
    return {split: data.adapt_dataset(ds, (1, 32, 32))
            for split, ds in mnist_raw.items()}


# ---------------------------------------------------------------------------
# trained baselines (disk-cached; training is deterministic)

def _cached_train(cache_name: str, preset: str, input_shape, dataset,
                  subset: int, cfg: train_mod.TrainConfig):
    CACHE.mkdir(exist_ok=True)
    path = CACHE / cache_name
    if path.exists():
        return load_model(path)
    spec = build_preset(preset, input_shape)
    images, labels = dataset.images, dataset.labels
    if subset:
        images, labels = images[:subset], labels[:subset]
    result = train_mod.train(spec, images, labels, cfg)
    save_model(result.model, path)
    return result.model


@pytest.fixture(scope="session")
def lenet5_trained(mnist32):
    """lenet5, 2 epochs on the full MNIST train split, seed 42."""
    cfg = train_mod.TrainConfig(epochs=2, batch_size=64, lr=0.05, momentum=0.9, seed=42)
    return _cached_train("lenet5_mnist_e2_s42.axm", "lenet5", (1, 32, 32),
                         mnist32["train"], 0, cfg)


@pytest.fixture(scope="session")
def alexmini_trained(mnist_raw):
    """alexnet_mini, 2 epochs on the first 20k MNIST images, seed 42."""
    cfg = train_mod.TrainConfig(epochs=2, batch_size=64, lr=0.05, momentum=0.9, seed=42)
    return _cached_train("alexmini_mnist20k_e2_s42.axm", "alexnet_mini", (1, 28, 28),
                         mnist_raw["train"], 20000, cfg)


@pytest.fixture(scope="session")
def lenet5_qexact(lenet5_trained, mnist32):
    """Quantized lenet5 with every conv routed through the exact table."""
    params = quant.calibrate(lenet5_trained, mnist32["train"].images[:1024])
    return quant.quantize(lenet5_trained, params)


def qaccuracy(qmodel, images: np.ndarray, labels: np.ndarray,
              batch_size: int = 250) -> float:
    """Top-1 accuracy (percent) of a quantized model."""
    hits = 0
    for start in range(0, images.shape[0], batch_size):
        logits = quant.qforward(qmodel, images[start:start + batch_size])
        hits += int((np.argmax(logits, axis=1) == labels[start:start + batch_size]).sum())
    return 100.0 * hits / images.shape[0]


# ---------------------------------------------------------------------------
# acceptance gate reporting: every criterion prints one line at the end

ACCEPTANCE_RESULTS: list[tuple[int, bool, str]] = []


def record_criterion(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE_RESULTS.append((number, ok, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance gate")
    for number, ok, detail in sorted(ACCEPTANCE_RESULTS):
        verdict = "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d}: {verdict}  {detail}")
