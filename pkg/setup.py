from setuptools import setup

setup(
    name="voxfuse",
    version="0.1",
    packages=["voxfuse"],
    python_requires=">=3.8",
    install_requires=[
        "Click",
        "loguru",
        "numpy",
        "pydantic>=2",
    ],
    extras_require={
        "test": ["pytest"],
    },
    entry_points={
        "console_scripts": [
            "voxfuse=voxfuse.cli:cli",
        ]
    },
)
