"""Airflow-inertial odometry: IMU + learned airflow + wind-map dead reckoning."""

__version__ = "0.1.0"
