from setuptools import setup

pkg_name = 'lomaxrace'

setup(name=pkg_name,
      package_dir={
          '': 'python',
      },
      version='1.0.0',
      description='Lomax delegate racing for survival analysis with competing risks',
      license='Apache License, Version 2.0',
      packages=['lomaxrace', 'lomaxrace.v1'],
      python_requires='>=3.9',
      install_requires=[
          'numpy>=1.25',
          'scipy>=1.10',
          'pandas>=1.5',
          'tomli>=1.1; python_version < "3.11"',
      ],
      extras_require={
          'test': ['pytest>=7.0'],
      },
      py_modules=[
          'lomaxrace.v1.errors',
          'lomaxrace.v1.distributions',
          'lomaxrace.v1.model',
          'lomaxrace.v1.datasets',
          'lomaxrace.v1.gibbs',
          'lomaxrace.v1.mapfit',
          'lomaxrace.v1.evaluation',
          'lomaxrace.v1.interpret',
          'lomaxrace.v1.ldrcli',
      ],
      entry_points={
          'console_scripts': [
              'lomaxrace = lomaxrace.v1.ldrcli:main',
          ],
      },
      )
