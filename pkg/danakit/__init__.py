"""Dimension-adaptive neural networks for wearable sensor data.

A small numpy toolkit that trains classifiers accepting windows of any
sampling rate and any subset of sensors, and compares them against fixed
models fed through resampling and imputation pipelines.
"""
__copyright__ = "Copyright (C) 2024  The danakit Authors"
__license__ = "GNU GPLv2"
