import glob

from pybind11.setup_helpers import Pybind11Extension, build_ext
from setuptools import setup

ext = Pybind11Extension(
    "trackemb._core",
    sources=["bindings/py_module.cpp"] + sorted(glob.glob("src/*.cpp")),
    include_dirs=["include", "vendor", "/usr/include/eigen3"],
    libraries=["png", "z"],
    cxx_std=20,
    extra_compile_args=["-O3"],
)

setup(
    ext_modules=[ext],
    cmdclass={"build_ext": build_ext},
)
