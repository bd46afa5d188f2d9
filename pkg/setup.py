from setuptools import find_packages, setup

setup(
    name='stylecraft',
    version='0.1.0',
    description="Reference-based style adapter for toy text-to-video diffusion",
    packages=find_packages(exclude=['tests', 'src']),
    package_data={'stylecraft': ['data/curriculum.json']},
    install_requires=['numpy', 'scipy', 'pandas', 'setuptools', 'matplotlib', 'scikit_learn'],
    entry_points={'console_scripts': ['stylecraft=stylecraft.cli:run']},
)
