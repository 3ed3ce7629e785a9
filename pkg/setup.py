from setuptools import setup

setup(
    name="flowtsvad",
    version="0.1.0",
    author="Your Name",
    description="Generative target-speaker voice activity detection with flow matching in a label latent space",
    packages=["src", "src.flowtsvad", "resources", "resources.configs"],
    package_data={"resources.configs": ["*.yaml"]},
    include_package_data=True,
    zip_safe=False,
    python_requires=">=3.9",
    install_requires=[
        "numpy>=1.22",
        "torch>=2.0",
        "scipy>=1.8",
        "pandas>=1.0.0",
        "tqdm>=4.60",
        "pyyaml>=5.4",
    ],
    extras_require={"test": ["pytest>=7"]},
    entry_points={"console_scripts": ["flowtsvad=src.flowtsvad.cli:main"]},
)
