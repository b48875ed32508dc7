"""Synthetic feature-shifted segmentation datasets and a portable file format.

Each client draws blob-segmentation samples through its own ``DomainSpec``
(intensity gain/bias, noise level, texture frequency), emulating data
collected on different devices. Generation is deterministic in the seed.

The on-disk format is little-endian binary:

    magic "FLWRDS1\\0" | u32 version | u32 count | u32 H | u32 W
    per sample: H*W float32 image values, then H*W uint8 mask values
    u64 footer length | JSON footer (domain spec + split index lists)

Images are quantized to float32 at generation time so a save/load cycle is
a bitwise identity.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import DatasetFormatError, DatasetShapeError, DatasetTruncatedError
from .network import Tensor

MAGIC = b"FLWRDS1\x00"
FORMAT_VERSION = 1

# Peak added by the multiplicative texture pattern, pre gain/bias/noise.
TEXTURE_AMPLITUDE = 0.2

DEFAULT_SPLIT_RATIOS = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class DomainSpec:
    """Per-client acquisition characteristics of the synthetic imager."""

    gain: float = 1.0
    bias: float = 0.0
    noise_sigma: float = 0.0
    blob_count_range: tuple[int, int] = (1, 3)
    blob_radius_range: tuple[float, float] = (1.5, 3.5)
    texture_freq: float = 3.0


@dataclass
class Sample:
    image: Tensor  # [1, H, W] float64
    mask: Tensor  # [1, H, W] float64, strictly {0, 1}


@dataclass
class DatasetBundle:
    train: list[Sample]
    val: list[Sample]
    test: list[Sample]
    domain: DomainSpec
    split_ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS

    def all_samples(self) -> list[Sample]:
        return [*self.train, *self.val, *self.test]


# Four clients with deliberately unequal acquisition: client 1 is dim,
# client 3 is bright with an intensity offset, client 4 is noisy. The noisy
# client is the one a plain parameter average systematically underserves.
SHIFT4_DOMAINS = (
    DomainSpec(gain=0.6, bias=0.0, noise_sigma=0.02, texture_freq=2.0),
    DomainSpec(gain=1.0, bias=0.0, noise_sigma=0.05, texture_freq=3.0),
    DomainSpec(gain=1.4, bias=0.2, noise_sigma=0.02, texture_freq=4.0),
    DomainSpec(gain=1.0, bias=-0.2, noise_sigma=0.10, texture_freq=5.0),
)

BENCHMARKS: dict[str, tuple[DomainSpec, ...]] = {"shift4": SHIFT4_DOMAINS}


def benchmark_domains(name: str) -> tuple[DomainSpec, ...]:
    try:
        return BENCHMARKS[name]
    except KeyError:
        known = ", ".join(sorted(BENCHMARKS))
        raise ValueError(f"unknown benchmark {name!r} (registered: {known})") from None


def _validate_spec(spec: DomainSpec) -> None:
    if spec.noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    lo, hi = spec.blob_count_range
    if lo > hi or lo < 1:
        raise ValueError(f"blob_count_range {spec.blob_count_range} is empty or non-positive")
    rlo, rhi = spec.blob_radius_range
    if rlo > rhi or rlo <= 0:
        raise ValueError(f"blob_radius_range {spec.blob_radius_range} is empty or non-positive")


def _render_sample(spec: DomainSpec, h: int, w: int, rng: np.random.Generator) -> Sample:
    ys, xs = np.mgrid[0:h, 0:w].astype(np.float64)
    mask = np.zeros((h, w), dtype=bool)
    base = np.zeros((h, w), dtype=np.float64)
    lo, hi = spec.blob_count_range
    count = int(rng.integers(lo, hi + 1))
    for _ in range(count):
        cx = rng.uniform(0.0, w - 1.0)
        cy = rng.uniform(0.0, h - 1.0)
        rx = rng.uniform(*spec.blob_radius_range)
        ry = rng.uniform(*spec.blob_radius_range)
        theta = rng.uniform(0.0, np.pi)
        dx = xs - cx
        dy = ys - cy
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        r2 = u * u + v * v
        mask |= r2 <= 1.0
        base = np.maximum(base, np.clip(1.0 - r2, 0.0, 1.0))
    texture = TEXTURE_AMPLITUDE * 0.5 * (
        1.0 + np.sin(2.0 * np.pi * spec.texture_freq * xs / w)
        * np.cos(2.0 * np.pi * spec.texture_freq * ys / h)
    )
    noise = rng.normal(0.0, spec.noise_sigma, size=(h, w)) if spec.noise_sigma > 0 else 0.0
    image = spec.gain * (base + texture) + spec.bias + noise
    # Quantize to float32 so the on-disk format round-trips bitwise.
    image = image.astype(np.float32).astype(np.float64)
    return Sample(image[None, :, :], mask.astype(np.float64)[None, :, :])


def generate_client_dataset(
    spec: DomainSpec,
    n: int,
    h: int,
    w: int,
    seed: int,
    split_ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
) -> DatasetBundle:
    """Generate one client's dataset, deterministically in ``seed``.

    Samples are disjointly split train/val/test by ``split_ratios``
    (train and val sizes floor, test takes the remainder).
    """
    if n < 10:
        raise ValueError("n must be >= 10")
    if h < 8 or w < 8:
        raise ValueError("H and W must be >= 8")
    if len(split_ratios) != 3 or abs(sum(split_ratios) - 1.0) > 1e-9:
        raise ValueError("split_ratios must be three values summing to 1")
    _validate_spec(spec)

    rng = np.random.default_rng(seed)
    samples = [_render_sample(spec, h, w, rng) for _ in range(n)]
    order = rng.permutation(n)
    n_train = int(np.floor(split_ratios[0] * n))
    n_val = int(np.floor(split_ratios[1] * n))
    train_idx = order[:n_train]
    val_idx = order[n_train : n_train + n_val]
    test_idx = order[n_train + n_val :]
    return DatasetBundle(
        train=[samples[i] for i in train_idx],
        val=[samples[i] for i in val_idx],
        test=[samples[i] for i in test_idx],
        domain=spec,
        split_ratios=tuple(split_ratios),
    )


def save_dataset(bundle: DatasetBundle, path: str) -> None:
    """Write a bundle in the portable binary format described above."""
    samples = bundle.all_samples()
    if not samples:
        raise ValueError("bundle has no samples")
    h, w = samples[0].image.shape[1:]
    chunks = [MAGIC, struct.pack("<IIII", FORMAT_VERSION, len(samples), h, w)]
    for sample in samples:
        if sample.image.shape != (1, h, w) or sample.mask.shape != (1, h, w):
            raise ValueError("all samples must share the header shape")
        chunks.append(sample.image.astype("<f4").tobytes())
        chunks.append(sample.mask.astype(np.uint8).tobytes())
    counts = np.cumsum([0, len(bundle.train), len(bundle.val), len(bundle.test)])
    footer = {
        "domain": asdict(bundle.domain),
        "splits": {
            "train": list(range(counts[0], counts[1])),
            "val": list(range(counts[1], counts[2])),
            "test": list(range(counts[2], counts[3])),
        },
        "split_ratios": list(bundle.split_ratios),
    }
    footer_bytes = json.dumps(footer, sort_keys=True).encode("utf-8")
    chunks.append(struct.pack("<Q", len(footer_bytes)))
    chunks.append(footer_bytes)
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, size: int, what: str) -> bytes:
        if self.pos + size > len(self.blob):
            raise DatasetTruncatedError(
                f"file truncated while reading {what} "
                f"(needed {size} bytes at offset {self.pos}, have {len(self.blob) - self.pos})"
            )
        out = self.blob[self.pos : self.pos + size]
        self.pos += size
        return out

    @property
    def remaining(self) -> int:
        return len(self.blob) - self.pos


def load_dataset(path: str) -> DatasetBundle:
    """Read a bundle back; the inverse of :func:`save_dataset`."""
    with open(path, "rb") as fh:
        reader = _Reader(fh.read())

    magic = reader.take(len(MAGIC), "magic")
    if magic != MAGIC:
        raise DatasetFormatError(f"bad magic {magic!r}; expected {MAGIC!r}")
    version, count, h, w = struct.unpack("<IIII", reader.take(16, "header"))
    if version != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported format version {version}; expected {FORMAT_VERSION}")

    per_sample = h * w * 4 + h * w
    samples = []
    for i in range(count):
        raw = reader.take(per_sample, f"sample {i}")
        image = np.frombuffer(raw[: h * w * 4], dtype="<f4").astype(np.float64).reshape(1, h, w)
        mask_bytes = np.frombuffer(raw[h * w * 4 :], dtype=np.uint8)
        if not np.all((mask_bytes == 0) | (mask_bytes == 1)):
            raise DatasetFormatError("mask payload must contain only 0 and 1 bytes")
        samples.append(Sample(image, mask_bytes.astype(np.float64).reshape(1, h, w)))

    (footer_len,) = struct.unpack("<Q", reader.take(8, "footer length"))
    footer_raw = reader.take(footer_len, "footer")
    if reader.remaining != 0:
        raise DatasetShapeError(
            f"{reader.remaining} unexpected trailing bytes; header and payload sizes disagree"
        )
    try:
        footer = json.loads(footer_raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f"footer is not valid JSON: {exc}") from exc

    try:
        domain_dict = dict(footer["domain"])
        splits = footer["splits"]
        ratios = tuple(footer["split_ratios"])
        split_lists = [list(splits[name]) for name in ("train", "val", "test")]
    except (KeyError, TypeError) as exc:
        raise DatasetFormatError(f"footer is missing required fields: {exc}") from exc

    seen = [i for lst in split_lists for i in lst]
    if sorted(seen) != list(range(count)):
        raise DatasetShapeError("split index lists do not partition the sample range")

    domain_dict["blob_count_range"] = tuple(domain_dict["blob_count_range"])
    domain_dict["blob_radius_range"] = tuple(domain_dict["blob_radius_range"])
    domain = DomainSpec(**domain_dict)
    train, val, test = ([samples[i] for i in lst] for lst in split_lists)
    return DatasetBundle(train=train, val=val, test=test, domain=domain, split_ratios=ratios)


def samples_equal(a: Sample, b: Sample) -> bool:
    return (
        a.image.shape == b.image.shape
        and a.mask.shape == b.mask.shape
        and np.array_equal(a.image, b.image)
        and np.array_equal(a.mask, b.mask)
    )


def bundles_equal(a: DatasetBundle, b: DatasetBundle) -> bool:
    """Bitwise equality of two bundles (samples, domain, and ratios)."""
    if a.domain != b.domain or a.split_ratios != b.split_ratios:
        return False
    for split_a, split_b in ((a.train, b.train), (a.val, b.val), (a.test, b.test)):
        if len(split_a) != len(split_b):
            return False
        if not all(samples_equal(x, y) for x, y in zip(split_a, split_b)):
            return False
    return True
