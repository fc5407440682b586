import os

from setuptools import setup

options = {}

if os.environ.get("COMPILE_WITH_MYPYC"):
    from mypyc.build import mypycify

    # the stepping kernels are the hot loop of every ensemble
    options["ext_modules"] = mypycify(
        [
            "collapse_sde/models.py",
            "collapse_sde/noise.py",
            "collapse_sde/sde.py",
        ]
    )

setup(**options)
