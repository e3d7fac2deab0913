"""Download benchmark archives into the local cache and verify their digests.

Each dataset lists one or more sources tried in order. A source is an
archive URL with the digest its publisher lists (MD5 for all three
benchmarks) and an unpack rule. After unpacking, cached files are checked
against pinned SHA-256 digests where we have them (MNIST) and a
``SHA256SUMS`` manifest is written so later runs can confirm the cache
without the network.
"""

from __future__ import annotations

import gzip
import hashlib
import logging
import shutil
import tarfile
import tempfile
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

from .datasets import CIFAR_TEST_FILES, CIFAR_TRAIN_FILES, IDX_FILES

log = logging.getLogger(__name__)

MANIFEST = "SHA256SUMS"


class DigestError(RuntimeError):
    pass


@dataclass(frozen=True)
class Source:
    url: str
    digest: str
    algorithm: str = "md5"
    # "gunzip:<target>" or "tar:<member>=<target>,..."; empty copies the file as-is
    unpack: str = ""


@dataclass
class DatasetSpec:
    name: str
    files: tuple
    sources: list = field(default_factory=list)
    pinned_sha256: dict = field(default_factory=dict)


_IDX_NAMES = tuple(IDX_FILES.values())

_MNIST_SHA256 = {
    "train-images-idx3-ubyte": "ba891046e6505d7aadcbbe25680a0738ad16aec93bde7f9b65e87a2fc25776db",
    "train-labels-idx1-ubyte": "65a50cbbf4e906d70832878ad85ccda5333a97f0f4c3dd2ef09a8a9eef7101c5",
    "t10k-images-idx3-ubyte": "0fa7898d509279e482958e8ce81c8e77db3f2f8254e26661ceb7762c4d494ce7",
    "t10k-labels-idx1-ubyte": "ff7bcfd416de33731a308c3f266cc351222c34898ecbeaf847f06e48f7ec33f2",
}
_MNIST_MD5 = {
    "train-images-idx3-ubyte": "f68b3c2dcbeaaa9fbdd348bbdeb94873",
    "train-labels-idx1-ubyte": "d53e105ee54ea40749a09fcbcd1e9432",
    "t10k-images-idx3-ubyte": "9fb629c4189551a2d022fa330f9573f3",
    "t10k-labels-idx1-ubyte": "ec29112dd5afa0611ce80d1b7f02629c",
}
_FMNIST_MD5 = {
    "train-images-idx3-ubyte": "8d4fb7e6c68d591d4c3dfef9ec88bf0d",
    "train-labels-idx1-ubyte": "25c81989df183df01b3e8a0aad5dffbe",
    "t10k-images-idx3-ubyte": "bef4ecab320f06d8554ea6380940ec79",
    "t10k-labels-idx1-ubyte": "bb300cfdad3c16e7a12a480ee83cd310",
}


def _gz_sources(base: str, md5s: dict) -> list:
    return [Source(f"{base}{name}.gz", md5s[name], "md5", f"gunzip:{name}") for name in _IDX_NAMES]


# npm registry tarball carrying the raw MNIST IDX files; reachable from
# networks that only proxy package registries.
_MNIST_NPM = Source(
    "https://registry.npmjs.org/mnist-data/-/mnist-data-1.2.6.tgz",
    "8f87f2d0d9133e6c9f7012d6d26bb05409e7e870a1de21d1a600b8d400cc07ed",
    "sha256",
    "tar:" + ",".join(f"package/data/{n}={n}" for n in _IDX_NAMES),
)

REGISTRY = {
    "mnist": DatasetSpec(
        "mnist", _IDX_NAMES,
        [_gz_sources("https://ossci-datasets.s3.amazonaws.com/mnist/", _MNIST_MD5), [_MNIST_NPM]],
        _MNIST_SHA256,
    ),
    "fashion_mnist": DatasetSpec(
        "fashion_mnist", _IDX_NAMES,
        [_gz_sources("http://fashion-mnist.s3-website.eu-central-1.amazonaws.com/", _FMNIST_MD5)],
    ),
    "cifar10": DatasetSpec(
        "cifar10", CIFAR_TRAIN_FILES + CIFAR_TEST_FILES,
        [[Source("https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz",
                 "c32a1d4ab5d03f1284b67883e8d87530", "md5",
                 "tar:" + ",".join(f"cifar-10-batches-bin/{n}={n}"
                                   for n in CIFAR_TRAIN_FILES + CIFAR_TEST_FILES))]],
    ),
}


def file_digest(path, algorithm: str = "sha256") -> str:
    h = hashlib.new(algorithm)
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _read_manifest(root: Path) -> dict:
    path = root / MANIFEST
    if not path.exists():
        return {}
    out = {}
    for line in path.read_text().splitlines():
        digest, _, name = line.partition("  ")
        if name:
            out[name] = digest
    return out


def is_cached(spec: DatasetSpec, root: Path) -> bool:
    manifest = _read_manifest(root)
    for name in spec.files:
        path = root / name
        expected = spec.pinned_sha256.get(name) or manifest.get(name)
        if not path.exists() or expected is None or file_digest(path) != expected:
            return False
    return True


def _download(url: str, dest: Path, timeout: float):
    with urllib.request.urlopen(url, timeout=timeout) as resp, open(dest, "wb") as out:
        shutil.copyfileobj(resp, out)


def _unpack(source: Source, archive: Path, root: Path) -> list:
    kind, _, rule = source.unpack.partition(":")
    written = []
    if kind == "gunzip":
        with gzip.open(archive, "rb") as src, open(root / rule, "wb") as dst:
            shutil.copyfileobj(src, dst)
        written.append(rule)
    elif kind == "tar":
        mapping = dict(item.split("=", 1) for item in rule.split(","))
        with tarfile.open(archive, "r:*") as tar:
            for member, target in mapping.items():
                fh = tar.extractfile(member)
                if fh is None:
                    raise DigestError(f"{source.url}: archive lacks {member}")
                with open(root / target, "wb") as dst:
                    shutil.copyfileobj(fh, dst)
                written.append(target)
    else:
        shutil.copyfile(archive, root / Path(source.url).name)
        written.append(Path(source.url).name)
    return written


def fetch_dataset(name: str, data_dir, timeout: float = 60.0, registry: dict | None = None) -> str:
    """Populate ``<data_dir>/<name>/``. Returns "cached" or "fetched".

    Raises ``DigestError`` when every source fails verification; offending
    files are removed.
    """
    registry = REGISTRY if registry is None else registry
    if name not in registry:
        raise ValueError(f"unknown dataset {name!r}; known: {sorted(registry)}")
    spec = registry[name]
    root = Path(data_dir) / name
    if is_cached(spec, root):
        return "cached"
    root.mkdir(parents=True, exist_ok=True)
    errors = []
    for group in spec.sources:
        try:
            with tempfile.TemporaryDirectory(dir=root) as tmp:
                written = []
                for source in group:
                    archive = Path(tmp) / Path(source.url).name
                    log.info("downloading %s", source.url)
                    _download(source.url, archive, timeout)
                    got = file_digest(archive, source.algorithm)
                    if got != source.digest:
                        archive.unlink(missing_ok=True)
                        raise DigestError(f"{source.url}: {source.algorithm} {got} != expected {source.digest}")
                    written += _unpack(source, archive, root)
            for fname in written:
                pinned = spec.pinned_sha256.get(fname)
                if pinned is not None and file_digest(root / fname) != pinned:
                    for f in written:
                        (root / f).unlink(missing_ok=True)
                    raise DigestError(f"{fname}: unpacked content does not match pinned sha256")
            lines = [f"{file_digest(root / f)}  {f}" for f in spec.files]
            (root / MANIFEST).write_text("\n".join(lines) + "\n")
            return "fetched"
        except DigestError as exc:
            errors.append(str(exc))
            log.warning("%s", exc)
        except OSError as exc:
            errors.append(f"{group[0].url}: {exc}")
            log.warning("source unavailable: %s", exc)
    if any("expected" in e or "pinned" in e for e in errors):
        raise DigestError("; ".join(errors))
    raise ConnectionError("; ".join(errors))

