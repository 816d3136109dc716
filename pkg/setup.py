from setuptools import setup


def readme():
    with open('README.rst') as f:
        return f.read()


setup(name='gfuzz',
      version='0.3.0',
      description='Directed greybox fuzzing of syscall sequences against '
                  'declarative kernel scenarios',
      long_description=readme(),
      license='MIT',
      packages=['gfuzz'],
      package_data={'gfuzz': ['data/*.json', 'data/scenarios/*.json']},
      setup_requires=["pytest-runner"],
      tests_require=["pytest"],
      classifiers=[
          'Development Status :: 3 - Alpha',
          'Intended Audience :: Science/Research',
          'License :: OSI Approved :: MIT License',
          'Programming Language :: Python :: 3.8',
          'Topic :: Security',
          'Topic :: Software Development :: Testing',
      ],
      install_requires=['objectpath', 'pytz', 'docopt', 'networkx', 'numpy',
                        'scipy', 'pandas'],
      entry_points={'console_scripts': ['gfuzz=gfuzz.cli:main']},
      python_requires='>=3.8',
      zip_safe=False)
