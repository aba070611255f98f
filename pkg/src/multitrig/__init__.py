"""Desk-scale lab for multi-target trigger attacks on object detectors.

The pipeline jointly trains a small grid detector with a conditional
trigger generator so that, at inference time, a tiled low-amplitude
trigger switches the detector into one of five malicious behaviours
(object removal, misclassification, or fabrication, targeted or not).
"""

__version__ = "0.1.0"
