"""Surface reconstruction from multi-view RGB and diffuse-LiDAR transients.

Optimizes a Gaussian-surfel scene against photometric and time-of-flight
measurements, simulates the sensor rig to produce synthetic datasets, and
analyzes how measurement rank grows with the number of views.
"""

__version__ = "0.1.0"
