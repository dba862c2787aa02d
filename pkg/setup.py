"""Setup rekd."""

from setuptools import find_packages, setup

with open("README.md") as f:
    long_description = f.read()

extra_reqs = {
    "dev": ["pre-commit", "python-dotenv"],
    "test": [
        "pytest",
        "pytest-cov",
    ],
}


setup(
    name="rekd",
    description="Rotation-equivariant oriented keypoint detection",
    long_description=long_description,
    long_description_content_type="text/markdown",
    python_requires=">=3.9",
    classifiers=[
        "Intended Audience :: Science/Research",
        "License :: OSI Approved :: MIT License",
        "Programming Language :: Python :: 3",
        "Programming Language :: Python :: 3.9",
        "Topic :: Scientific/Engineering :: Image Recognition",
    ],
    keywords="keypoints equivariance rotation feature-matching",
    license="MIT",
    packages=find_packages(exclude=["ez_setup", "examples", "tests"]),
    include_package_data=True,
    zip_safe=False,
    install_requires=["rekd.runtime"],
    extras_require=extra_reqs,
)
