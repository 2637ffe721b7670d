import os
from setuptools import setup, find_packages

# Utility function to read the README file.
# Used for the long_description.
def read(fname):
    return open(os.path.join(os.path.dirname(__file__), fname)).read()

def requirements(fname):
    with open(os.path.join(os.path.dirname(__file__), fname)) as f:
        return [line.strip() for line in f if line.strip() and not line.startswith("#")]

setup(
    name = "lsdiff",
    version = "0.1.0",
    description = ("Audio-driven lip-sync video diffusion: masking, training, segmented inference, "
                   "dataset curation and evaluation"),
    license = "GPL-3",
    keywords = "lip sync, video diffusion, talking face",
    url = "",
    packages=find_packages(exclude=["tests", "examples", "examples.*"]),
    long_description=read('README.md'),
    long_description_content_type="text/markdown",
    install_requires=requirements("req.txt"),
    extras_require={
        "diffusers": ["diffusers==0.21.4"],
        "test": ["pytest==7.4.2"],
    },
    entry_points={
        "console_scripts": ["lsdiff=lsdiff.cli:main"],
    },
    python_requires=">=3.8",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
        "License :: OSI Approved :: GNU General Public License v3 (GPLv3)",
    ],
)
