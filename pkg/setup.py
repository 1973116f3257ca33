"""
setuptools para o Atlas Lab.

Instale com: pip install -e .
Gera o comando `atlas-lab` (app.cli:main).
"""

from setuptools import find_packages, setup

from app.__version__ import __version__

setup(
    name="atlas-lab",
    version=__version__,
    description="Conditional deformable template learning on synthetic ageing populations",
    packages=find_packages(include=["app", "app.*"]),
    package_data={"app": ["templates/*.j2"]},
    python_requires=">=3.10",
    install_requires=[
        "numpy>=1.24.0",
        "scipy>=1.11.0",
        "pydantic>=2.5.0",
        "Pillow>=10.0.0",
        "imageio>=2.31.0",
        "jinja2>=3.1.0",
        "tqdm>=4.66.0",
        "fastapi>=0.109.0",
        "uvicorn>=0.27.0",
    ],
    extras_require={
        "test": ["pytest>=8.0.0", "httpx>=0.27.0"],
    },
    entry_points={
        "console_scripts": ["atlas-lab = app.cli:main"],
    },
)
