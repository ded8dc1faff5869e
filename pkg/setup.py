from setuptools import setup, find_packages

setup(
    name='fcs_mpc',
    version='1.0',
    packages=find_packages(exclude=["tests"]),
)
