"""Learned binary descriptors for 32x32 image patches.

``bad`` and ``bad_train`` hold the box-average-difference descriptor and its
greedy trainer, ``hashsift`` a learned sign projection of SIFT, and
``matcheval`` Hamming matching with FPR-95 and matching AP.
"""

__version__ = "0.1.0"
