# Pydantic models for scenes, the network, training, calibration and measurement
