from setuptools import setup, find_packages
import sys
from pathlib import Path

CURRENT_DIRECTORY = Path(__file__).parent.absolute()

CURRENT_PYTHON = sys.version_info[:2]
REQUIRED_PYTHON = (3, 8)
if CURRENT_PYTHON < REQUIRED_PYTHON:
    sys.stderr.write("""
==========================
Unsupported Python version
==========================
This version of triage_engine requires Python {}.{}
Environment Python version =  {}.{}.
""".format(*(REQUIRED_PYTHON + CURRENT_PYTHON)))
    sys.exit(1)

with open(CURRENT_DIRECTORY / "README.md", 'r') as f:
    long_description = f.read()

with open(CURRENT_DIRECTORY / 'requirements.txt') as f:
    require = [x.strip() for x in f.readlines() if x.strip() and not x.startswith('pytest')]

setup(
    name='triage_engine',
    version='0.3.0',
    python_requires='>={}.{}'.format(*REQUIRED_PYTHON),
    description='Few-shot malware triage on byte-entropy graphs',
    license="MIT",
    long_description=long_description,
    long_description_content_type='text/markdown',
    packages=find_packages(exclude=['tests', 'scratch']),
    install_requires=require,
    extras_require={'test': ['pytest>=6.2']},
    entry_points={
        'console_scripts': ['triage-engine=triage_engine.cli:main'],
    },
)
