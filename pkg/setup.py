from setuptools import setup

with open("README.md", "r") as fh:
    long_description = fh.read()

setup(
    name="divlab",
    version="0.1.0",
    description="A desk-scale lab for measuring representational divergence under causal interventions.",
    long_description=long_description,
    long_description_content_type="text/markdown",
    packages=["divlab", "divlab.circuits", "divlab.schemas"],
    package_data={"divlab.circuits": ["*.txt"], "divlab.schemas": ["*.json"]},
    python_requires=">=3.9",
    install_requires=["numpy>=1.22", "scipy>=1.8", "scikit-learn>=1.0"],
    extras_require={"tests": ["pytest>=7", "hypothesis>=6"]},
    classifiers=[
        "Programming Language :: Python :: 3",
        "Operating System :: OS Independent",
        "Topic :: Scientific/Engineering :: Artificial Intelligence",
    ]
)
