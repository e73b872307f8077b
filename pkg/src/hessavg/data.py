"""LIBSVM dataset ingestion: fetch, verify, parse, split.

Datasets are described by in-repo manifests pinning the upstream URL and,
when known, a sha256 digest. Fetching is cache-first: a valid local copy
is reused with zero network traffic. When a manifest carries no pinned
digest, the digest observed on first fetch is recorded in a ``.sha256``
sidecar next to the file and enforced from then on.
"""

from __future__ import annotations

import bz2
import hashlib
import os
import re
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from numpy.typing import NDArray

__all__ = [
    "SparseDataset",
    "DatasetManifest",
    "LibsvmParseError",
    "DatasetUnavailable",
    "ChecksumMismatch",
    "MANIFESTS",
    "parse_libsvm",
    "serialize_libsvm",
    "fetch_dataset",
    "train_split",
    "load_dataset",
    "default_data_dir",
]

DATA_DIR_ENV = "HESSAVG_DATA_DIR"

_HEX64 = re.compile(r"^[0-9a-f]{64}$")


class LibsvmParseError(ValueError):
    """Malformed LIBSVM input; the message carries the 1-based line number."""


class DatasetUnavailable(RuntimeError):
    """A dataset is neither cached locally nor fetchable."""


class ChecksumMismatch(RuntimeError):
    """Downloaded or cached file does not match the expected sha256."""


@dataclass
class SparseDataset:
    """Parsed LIBSVM data with 1-based feature indices preserved.

    ``rows[i]`` is the list of ``(index, value)`` pairs of row ``i`` with
    indices strictly increasing; ``labels`` is a +-1 vector. Conversion to
    a dense 0-based matrix happens only at the oracle boundary via
    :meth:`to_dense`.
    """

    n: int
    dim: int
    rows: list[list[tuple[int, float]]]
    labels: NDArray

    def to_dense(self) -> tuple[NDArray, NDArray]:
        x = np.zeros((self.n, self.dim))
        for i, row in enumerate(self.rows):
            for idx, val in row:
                x[i, idx - 1] = val
        return x, np.asarray(self.labels, dtype=float)


@dataclass
class DatasetManifest:
    name: str
    url: str
    sha256: Optional[str] = None
    n: Optional[int] = None
    dim: Optional[int] = None
    train_size: Optional[int] = None
    compression: Optional[str] = None  # None or "bz2"
    label_map: Optional[dict] = field(default=None)

    def __post_init__(self) -> None:
        if self.sha256 is not None and not _HEX64.match(self.sha256):
            raise ValueError(f"sha256 for {self.name} must be 64 lowercase hex chars")

    @property
    def filename(self) -> str:
        return self.url.rsplit("/", 1)[-1]


# Upstream digests are not pinned because the files cannot be mirrored into
# this repository; the first verified fetch pins them via sidecar.
MANIFESTS = {
    "ijcnn1": DatasetManifest(
        name="ijcnn1",
        url="https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/binary/ijcnn1.tr.bz2",
        n=35000,
        dim=22,
        train_size=35000,
        compression="bz2",
    ),
    "mushrooms": DatasetManifest(
        name="mushrooms",
        url="https://www.csie.ntu.edu.tw/~cjlin/libsvmtools/datasets/binary/mushrooms",
        n=8124,
        dim=112,
        train_size=5500,
        label_map={1: 1, 2: -1},
    ),
}


def default_data_dir(override: Optional[str] = None) -> Path:
    if override:
        return Path(override)
    env = os.environ.get(DATA_DIR_ENV)
    if env:
        return Path(env)
    return Path("data")


# ---------------------------------------------------------------------------
# Parsing
# ---------------------------------------------------------------------------


def parse_libsvm(
    text: str | bytes,
    label_map: Optional[dict] = None,
    dim: Optional[int] = None,
) -> SparseDataset:
    """Parse LIBSVM-format lines ``label idx:val idx:val ...``.

    Indices must be 1-based and strictly increasing within a row. Labels
    are remapped through ``label_map`` when given and must end up in
    {-1, +1}. ``dim`` overrides the max index seen, guarding against
    underestimation when rare features are absent.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    rows: list[list[tuple[int, float]]] = []
    labels: list[float] = []
    max_index = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.split()
        try:
            raw_label = float(parts[0])
        except ValueError as err:
            raise LibsvmParseError(f"line {lineno}: unparsable label {parts[0]!r}") from err
        if raw_label == int(raw_label):
            raw_label = int(raw_label)
        if label_map is not None:
            if raw_label not in label_map:
                raise LibsvmParseError(f"line {lineno}: label {raw_label!r} not in label map")
            label = float(label_map[raw_label])
        else:
            label = float(raw_label)
        if label not in (-1.0, 1.0):
            raise LibsvmParseError(f"line {lineno}: label {label} not in {{-1, +1}}")
        row: list[tuple[int, float]] = []
        prev = 0
        for tok in parts[1:]:
            idx_str, _, val_str = tok.partition(":")
            try:
                idx = int(idx_str)
                val = float(val_str)
            except ValueError as err:
                raise LibsvmParseError(f"line {lineno}: malformed token {tok!r}") from err
            if idx <= prev:
                raise LibsvmParseError(
                    f"line {lineno}: indices must be strictly increasing (saw {idx} after {prev})"
                )
            prev = idx
            row.append((idx, val))
        max_index = max(max_index, prev)
        rows.append(row)
        labels.append(label)
    out_dim = dim if dim is not None else max_index
    if max_index > out_dim:
        raise LibsvmParseError(f"feature index {max_index} exceeds declared dim {out_dim}")
    return SparseDataset(n=len(rows), dim=out_dim, rows=rows, labels=np.asarray(labels))


def _format_value(val: float) -> str:
    if val == int(val):
        return str(int(val))
    return repr(val)


def serialize_libsvm(dataset: SparseDataset) -> str:
    """Inverse of :func:`parse_libsvm` on the parsed representation."""
    lines = []
    for label, row in zip(dataset.labels, dataset.rows):
        toks = [_format_value(float(label))]
        toks.extend(f"{idx}:{_format_value(val)}" for idx, val in row)
        lines.append(" ".join(toks))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# Fetching
# ---------------------------------------------------------------------------


def _sha256_file(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _download(url: str, dest: Path, timeout: float) -> None:
    import requests

    with requests.get(url, stream=True, timeout=timeout) as resp:
        resp.raise_for_status()
        with dest.open("wb") as fh:
            for chunk in resp.iter_content(chunk_size=1 << 20):
                fh.write(chunk)


def fetch_dataset(
    manifest: DatasetManifest,
    data_dir: Path | str,
    timeout: float = 60.0,
    downloader=_download,
) -> Path:
    """Return a verified local copy of the manifest's file, fetching once.

    A cached file whose digest matches is returned without any network
    traffic. A cached or downloaded file that contradicts the expected
    digest is deleted and :class:`ChecksumMismatch` raised. Network
    failures surface as :class:`DatasetUnavailable`.
    """
    data_dir = Path(data_dir)
    target = data_dir / manifest.name / manifest.filename
    sidecar = target.with_suffix(target.suffix + ".sha256")
    expected = manifest.sha256
    if expected is None and sidecar.exists():
        expected = sidecar.read_text().strip()

    if target.exists():
        digest = _sha256_file(target)
        if expected is not None and digest != expected:
            target.unlink()
            raise ChecksumMismatch(
                f"cached {target} has sha256 {digest}, expected {expected}; file removed"
            )
        if expected is None:
            sidecar.write_text(digest + "\n")
        return target

    target.parent.mkdir(parents=True, exist_ok=True)
    tmp_fd, tmp_name = tempfile.mkstemp(dir=target.parent, prefix=".fetch-")
    os.close(tmp_fd)
    tmp = Path(tmp_name)
    try:
        try:
            downloader(manifest.url, tmp, timeout)
        except Exception as err:
            raise DatasetUnavailable(
                f"could not fetch {manifest.name} from {manifest.url}: {err}. "
                f"On a networked machine run `hessavg fetch-data {manifest.name}` "
                f"or place the file at {target}."
            ) from err
        digest = _sha256_file(tmp)
        if expected is not None and digest != expected:
            raise ChecksumMismatch(
                f"downloaded {manifest.url} has sha256 {digest}, expected {expected}"
            )
        os.replace(tmp, target)
        sidecar.write_text(digest + "\n")
    finally:
        tmp.unlink(missing_ok=True)
    return target


def _read_text(path: Path, compression: Optional[str]) -> str:
    raw = path.read_bytes()
    if compression == "bz2" or (compression is None and path.suffix == ".bz2"):
        raw = bz2.decompress(raw)
    return raw.decode("utf-8")


# ---------------------------------------------------------------------------
# Splitting and loading
# ---------------------------------------------------------------------------


def train_split(dataset: SparseDataset, k: int, seed: int) -> tuple[SparseDataset, SparseDataset]:
    """Deterministic shuffled split: first ``k`` rows of a seeded permutation."""
    if k > dataset.n:
        raise ValueError(f"requested {k} rows from a dataset of {dataset.n}")
    perm = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed))).permutation(dataset.n)
    take = perm[:k]
    rest = perm[k:]

    def view(indices: NDArray) -> SparseDataset:
        return SparseDataset(
            n=len(indices),
            dim=dataset.dim,
            rows=[dataset.rows[i] for i in indices],
            labels=dataset.labels[indices],
        )

    return view(take), view(rest)


def load_dataset(
    name: str,
    data_dir: Optional[str | Path] = None,
    split_seed: int = 0,
    fetch: bool = True,
) -> SparseDataset:
    """Fetch (or reuse), parse, and train-split a manifest dataset."""
    if name not in MANIFESTS:
        raise KeyError(f"unknown dataset {name!r}; known: {sorted(MANIFESTS)}")
    manifest = MANIFESTS[name]
    directory = default_data_dir(str(data_dir) if data_dir else None)
    target = directory / manifest.name / manifest.filename
    if not target.exists() and not fetch:
        raise DatasetUnavailable(f"{name} not cached at {target} and fetching disabled")
    path = fetch_dataset(manifest, directory)
    parsed = parse_libsvm(_read_text(path, manifest.compression), manifest.label_map, manifest.dim)
    if manifest.n is not None and parsed.n < (manifest.train_size or 0):
        raise LibsvmParseError(
            f"{name}: parsed {parsed.n} rows, fewer than train size {manifest.train_size}"
        )
    if manifest.train_size is not None and manifest.train_size < parsed.n:
        parsed, _ = train_split(parsed, manifest.train_size, split_seed)
    return parsed
