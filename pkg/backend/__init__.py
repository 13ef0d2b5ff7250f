# Backend: simulation, inference and pipeline stages
