"""Builds the `tpla` extension module by delegating to cargo.

The extension lives in `crates/py` as an ordinary cdylib crate; this shim
exists so `pip install -e python/ --no-build-isolation` works without a
Rust-specific build backend. It runs `cargo build --release -p tpla-py`
and copies the produced shared library to wherever setuptools expects the
extension.
"""

import shutil
import subprocess
from pathlib import Path

from setuptools import Extension, setup
from setuptools.command.build_ext import build_ext

ROOT = Path(__file__).resolve().parent.parent


class CargoBuildExt(build_ext):
    def build_extension(self, ext):
        subprocess.run(["cargo", "build", "--release", "-p", "tpla-py"], cwd=ROOT, check=True)
        built = None
        for name in ("libtpla.so", "libtpla.dylib", "tpla.dll"):
            candidate = ROOT / "target" / "release" / name
            if candidate.exists():
                built = candidate
                break
        if built is None:
            raise FileNotFoundError("cargo did not produce the tpla shared library")
        dest = Path(self.get_ext_fullpath(ext.name))
        dest.parent.mkdir(parents=True, exist_ok=True)
        shutil.copy2(built, dest)


setup(
    ext_modules=[Extension("tpla", sources=[])],
    cmdclass={"build_ext": CargoBuildExt},
)
