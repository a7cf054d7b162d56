"""Label manifests, the test/train/val split and seeded batch iteration."""
from __future__ import annotations

import csv
import io
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator, Sequence

import numpy as np

from . import imaging
from .augmentation import AugmentationPolicy, augment, sample_seed

NORMAL = "NORMAL"
PNEUMONIA = "PNEUMONIA"
CLASSES = (NORMAL, PNEUMONIA)
LABEL_INDEX = {NORMAL: 0, PNEUMONIA: 1}


class ManifestError(ValueError):
    def __init__(self, message: str, line: int):
        self.line = line
        super().__init__(f"line {line}: {message}")


class LoadError(RuntimeError):
    def __init__(self, path: str, cause: Exception):
        self.path = path
        super().__init__(f"cannot load {path}: {cause}")


@dataclass(frozen=True)
class ManifestEntry:
    path: str
    label: str

    @property
    def target(self) -> int:
        return LABEL_INDEX[self.label]


@dataclass
class SplitResult:
    test: list[ManifestEntry]
    train: list[ManifestEntry]
    val: list[ManifestEntry]
    seed: int = 0

    def summary(self) -> dict:
        counts = {}
        for name in ("test", "train", "val"):
            part = getattr(self, name)
            per = {c: sum(e.label == c for e in part) for c in CLASSES}
            per["total"] = len(part)
            counts[name] = per
        return {"seed": self.seed, "counts": counts}


@dataclass
class Batch:
    inputs: np.ndarray           # [B, 3, S, S] float32
    labels: np.ndarray           # [B] int
    entries: list[ManifestEntry] = field(default_factory=list)


def load_manifest(data: bytes | str) -> list[ManifestEntry]:
    """Parse a ``path,label`` CSV. Labels must be exactly NORMAL or PNEUMONIA."""
    text = data.decode("utf-8") if isinstance(data, bytes) else data
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise ManifestError("missing header `path,label`", 1) from None
    if header != ["path", "label"]:
        raise ManifestError(f"header must be `path,label`, got {','.join(header)!r}", 1)
    entries = []
    seen: set[str] = set()
    for row in reader:
        line = reader.line_num
        if not row:
            continue
        if len(row) != 2:
            raise ManifestError(f"expected 2 columns, got {len(row)}", line)
        path, label = row
        if not path:
            raise ManifestError("empty path", line)
        if label not in LABEL_INDEX:
            raise ManifestError(f"unknown label {label!r}", line)
        if path in seen:
            raise ManifestError(f"duplicate path {path!r}", line)
        seen.add(path)
        entries.append(ManifestEntry(path, label))
    return entries


def read_manifest(path: str | os.PathLike) -> list[ManifestEntry]:
    """Load a manifest file, resolving relative image paths against its directory."""
    with open(path, "rb") as fh:
        entries = load_manifest(fh.read())
    base = os.path.dirname(os.path.abspath(path))
    return [ManifestEntry(e.path if os.path.isabs(e.path) else os.path.join(base, e.path), e.label)
            for e in entries]


def dump_manifest(entries: Sequence[ManifestEntry]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "label"])
    for e in entries:
        writer.writerow([e.path, e.label])
    return buf.getvalue()


def split_dataset(manifest: Sequence[ManifestEntry], seed: int, per_class_test: int = 150,
                  train_frac: Fraction = Fraction(4, 5), stratified: bool = False) -> SplitResult:
    """Hold out ``per_class_test`` entries of each class, then cut the rest into train/val.

    Train receives ``floor(train_frac * n)`` of the ``n`` remaining entries.
    """
    train_frac = Fraction(train_frac)
    rng = np.random.default_rng(seed)
    test_idx: set[int] = set()
    test: list[ManifestEntry] = []
    for cls in CLASSES:
        members = [i for i, e in enumerate(manifest) if e.label == cls]
        if len(members) < per_class_test:
            raise ValueError(f"class {cls} has {len(members)} entries, needs >= {per_class_test}")
        chosen = rng.choice(len(members), size=per_class_test, replace=False)
        for j in chosen:
            test_idx.add(members[j])
            test.append(manifest[members[j]])
    rest = [e for i, e in enumerate(manifest) if i not in test_idx]
    if stratified:
        train, val = [], []
        for cls in CLASSES:
            group = [e for e in rest if e.label == cls]
            order = rng.permutation(len(group))
            cut = math.floor(train_frac * len(group))
            train += [group[i] for i in order[:cut]]
            val += [group[i] for i in order[cut:]]
    else:
        order = rng.permutation(len(rest))
        cut = math.floor(train_frac * len(rest))
        train = [rest[i] for i in order[:cut]]
        val = [rest[i] for i in order[cut:]]
    return SplitResult(test, train, val, seed)


def epoch_order(n: int, run_seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng(np.random.SeedSequence([run_seed, epoch])).permutation(n)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("RADIODX_THREADS", "1")))
    except ValueError:
        return 1


def load_sample(entry: ManifestEntry, size: int = imaging.MODEL_SIZE,
                policy: AugmentationPolicy | None = None, seed: int = 0) -> np.ndarray:
    try:
        raster = imaging.load_raster(entry.path)
    except (OSError, ValueError) as exc:
        raise LoadError(entry.path, exc) from exc
    img = imaging.to_model_input(raster, size)
    if policy is not None:
        img, _ = augment(img, policy, seed)
    return img


def batches(entries: Sequence[ManifestEntry], batch_size: int = 32, epoch: int = 0, run_seed: int = 0,
            augment_policy: AugmentationPolicy | None = None, size: int = imaging.MODEL_SIZE,
            shuffle: bool = True, normalization: str = "unit") -> Iterator[Batch]:
    """Yield the epoch's batches in an order fixed by ``(run_seed, epoch)``.

    Per-sample augmentation seeds depend on the entry's index in ``entries``, so
    the output does not depend on how many loader threads run.
    """
    if not entries:
        raise ValueError("batches needs at least one entry")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = epoch_order(len(entries), run_seed, epoch) if shuffle else np.arange(len(entries))

    def load(i):
        seed = sample_seed(run_seed, epoch, int(i))
        return load_sample(entries[i], size, augment_policy, seed)

    workers = worker_count()
    pool = ThreadPoolExecutor(workers) if workers > 1 else None
    try:
        for start in range(0, len(order), batch_size):
            idx = order[start:start + batch_size]
            imgs = list(pool.map(load, idx)) if pool else [load(i) for i in idx]
            inputs = imaging.normalize(np.stack(imgs).astype(np.float32), normalization)
            yield Batch(inputs, np.array([entries[i].target for i in idx]), [entries[i] for i in idx])
    finally:
        if pool:
            pool.shutdown()


def write_split(result: SplitResult, out_dir: str | os.PathLike) -> dict:
    os.makedirs(out_dir, exist_ok=True)
    for name in ("test", "train", "val"):
        with open(os.path.join(out_dir, f"{name}.csv"), "w", encoding="utf-8", newline="") as fh:
            fh.write(dump_manifest(getattr(result, name)))
    summary = result.summary()
    with open(os.path.join(out_dir, "split.json"), "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2)
    return summary
