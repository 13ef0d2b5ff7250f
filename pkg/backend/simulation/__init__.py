# Simulation package
