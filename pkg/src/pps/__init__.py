"""Post-processing service for robotic in-pipe nondestructive assay runs.

Turns a robot run bundle (odometry, accumulated gamma spectra, planar
LiDAR, images) into attenuation-corrected U-235 mass per pipe segment,
with quality control, a review/approval workflow, and auto-generated
reports and database export files.
"""

__version__ = "0.1.0"
