import pathlib
from setuptools import find_packages, setup
from latentwave.__version__ import __version__


# The directory containing this file
HERE = pathlib.Path(__file__).parent

# The text of the README file
README = (HERE / "README.md").read_text()

setup(
    name="latentwave",
    version=__version__,
    description="Fast arbitrary-length audio generation with hierarchical spectrogram autoencoders and a latent GAN.",
    long_description=README,
    long_description_content_type="text/markdown",
    include_package_data=True,
    license="MIT",
    classifiers=[
        "Development Status :: 3 - Alpha",
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3 :: Only",
        "Programming Language :: Python :: 3.8",
        "Programming Language :: Python :: 3.9",
        "Topic :: Multimedia :: Sound/Audio",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ],
    packages=find_packages(
        exclude=(
            "examples",
            "configs",
            "requirements",
            "tests",
        )
    ),
    install_requires=[
        "numpy",
        "scipy",
        "torch",
        "torchaudio",
        "soundfile",
        "tqdm",
        "coloredlogs",
        "python-dotenv",
        "pyyaml",
        "pydantic<2",
    ],
    extras_require={"test": ["pytest", "pytest-mock"]},
    entry_points={"console_scripts": ["latentwave=latentwave.cli:main"]},
    python_requires=">=3.8"
)
