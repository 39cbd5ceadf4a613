#!/usr/bin/env python3
"""Download the MNIST and CIFAR-10 binaries the full test suite trains on.

Files land under <repo>/data by default (override with --data-dir or the
FEDMATCH_DATA_DIR environment variable).  Both datasets together are about
180 MB on disk.  Already-present files are kept unless --force is given.

Sizes are verified after download; the package's loaders additionally
validate magic numbers and record structure when the files are first read.
"""

import argparse
import gzip
import os
import shutil
import sys
import tarfile
import tempfile
import urllib.request
from pathlib import Path

MNIST_BASE_URLS = (
    "https://storage.googleapis.com/cvdf-datasets/mnist/",
    "https://ossci-datasets.s3.amazonaws.com/mnist/",
)
# decompressed size: header + records
MNIST_FILES = {
    "train-images-idx3-ubyte": 16 + 60000 * 28 * 28,
    "train-labels-idx1-ubyte": 8 + 60000,
    "t10k-images-idx3-ubyte": 16 + 10000 * 28 * 28,
    "t10k-labels-idx1-ubyte": 8 + 10000,
}
CIFAR_URL = "https://www.cs.toronto.edu/~kriz/cifar-10-binary.tar.gz"
CIFAR_MEMBERS = tuple(f"data_batch_{i}.bin" for i in range(1, 6)) + ("test_batch.bin",)
CIFAR_MEMBER_SIZE = 10000 * 3073


def download(url: str, dest: Path) -> None:
    print(f"  fetching {url}")
    with urllib.request.urlopen(url, timeout=60) as r, open(dest, "wb") as f:
        shutil.copyfileobj(r, f)


def check_size(path: Path, expected: int) -> None:
    got = path.stat().st_size
    if got != expected:
        raise RuntimeError(f"{path.name}: size {got}, expected {expected}")


def fetch_mnist(target: Path, force: bool) -> None:
    target.mkdir(parents=True, exist_ok=True)
    for name, size in MNIST_FILES.items():
        out = target / name
        if out.exists() and not force:
            print(f"  {name} already present")
            continue
        gz_name = name + ".gz"
        with tempfile.TemporaryDirectory() as td:
            gz_path = Path(td) / gz_name
            last_err = None
            for base in MNIST_BASE_URLS:
                try:
                    download(base + gz_name, gz_path)
                    last_err = None
                    break
                except OSError as e:
                    last_err = e
            if last_err is not None:
                raise last_err
            with gzip.open(gz_path, "rb") as src, open(out, "wb") as dst:
                shutil.copyfileobj(src, dst)
        check_size(out, size)
        print(f"  wrote {out}")


def fetch_cifar(target: Path, force: bool) -> None:
    target.mkdir(parents=True, exist_ok=True)
    if all((target / m).exists() for m in CIFAR_MEMBERS) and not force:
        print("  cifar batches already present")
        return
    with tempfile.TemporaryDirectory() as td:
        tar_path = Path(td) / "cifar-10-binary.tar.gz"
        download(CIFAR_URL, tar_path)
        with tarfile.open(tar_path, "r:gz") as tar:
            for member in tar.getmembers():
                name = os.path.basename(member.name)
                if name in CIFAR_MEMBERS:
                    with tar.extractfile(member) as src, \
                            open(target / name, "wb") as dst:
                        shutil.copyfileobj(src, dst)
                    check_size(target / name, CIFAR_MEMBER_SIZE)
                    print(f"  wrote {target / name}")
    missing = [m for m in CIFAR_MEMBERS if not (target / m).exists()]
    if missing:
        raise RuntimeError(f"archive lacked expected members: {missing}")


def main(argv=None) -> int:
    default_root = os.environ.get(
        "FEDMATCH_DATA_DIR", Path(__file__).resolve().parents[1] / "data")
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--data-dir", default=str(default_root),
                   help="destination root (default: %(default)s)")
    p.add_argument("--only", choices=("mnist", "cifar10"), default=None,
                   help="fetch just one dataset")
    p.add_argument("--force", action="store_true",
                   help="re-download files that already exist")
    args = p.parse_args(argv)

    root = Path(args.data_dir)
    try:
        if args.only in (None, "mnist"):
            print("mnist ->", root / "mnist")
            fetch_mnist(root / "mnist", args.force)
        if args.only in (None, "cifar10"):
            print("cifar10 ->", root / "cifar10")
            fetch_cifar(root / "cifar10", args.force)
    except (OSError, RuntimeError) as e:
        print(f"error: {e}", file=sys.stderr)
        print("no network access? provision the files by hand and point "
              "FEDMATCH_DATA_DIR at them", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
