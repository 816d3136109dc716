# Configuration file for the Sphinx documentation builder.

import os
import sys
sys.path.insert(0, os.path.abspath('../'))

project = 'gfuzz'
author = 'gfuzz developers'

extensions = ["sphinx.ext.autodoc"]
exclude_patterns = ['_build']

html_theme = 'sphinx_rtd_theme'
master_doc = 'index'
