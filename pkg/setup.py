#!/usr/bin/env python3
"""
vsex v0.0.1 - Setup Script
Variational state estimation for a stochastic Lorenz system observed
through a low-resolution camera, with a particle-filter baseline.
"""

from setuptools import setup, find_packages

setup(
    name="vsex",
    version="0.0.1",
    description="Unsupervised RNN state estimation trained by the ELBO.",
    packages=find_packages(exclude=["tests", "tests.*"]),
    install_requires=[
        "numpy>=1.21.0",
        "scipy>=1.7.0",
        "torch>=1.10.0",
        "rich>=12.0.0",
        "tqdm>=4.62.0",
        "crcmod>=1.7",
    ],
    extras_require={"test": ["pytest>=7.0.0", "filterpy>=1.4.5"]},
    entry_points={"console_scripts": ["vsex=vsex.main:main"]},
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Programming Language :: Python :: 3.10",
        "Programming Language :: Python :: 3.11",
        "Programming Language :: Python :: 3.12",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    python_requires=">=3.8",
)
