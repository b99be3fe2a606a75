# This file makes the 'lrbm' directory a Python package.
