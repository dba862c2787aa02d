"""Setup rekd.runtime."""

from setuptools import find_namespace_packages, setup

with open("README.md") as f:
    long_description = f.read()

inst_reqs = [
    "numpy>=1.22",
    "scipy>=1.8",
    "matplotlib>=3.5",
    "pydantic>=2.4",
    "pydantic-settings>=2.0",
    "aws-lambda-powertools>=1.18.0",
    "typing_extensions",
]

extra_reqs = {
    "test": ["pytest", "pytest-cov"],
}


setup(
    name="rekd.runtime",
    description="Rotation-equivariant oriented keypoint detector",
    long_description=long_description,
    long_description_content_type="text/markdown",
    python_requires=">=3.9",
    packages=find_namespace_packages(exclude=["tests*"]),
    include_package_data=True,
    zip_safe=False,
    install_requires=inst_reqs,
    extras_require=extra_reqs,
    entry_points={"console_scripts": ["rekd=src.cli:main"]},
)
