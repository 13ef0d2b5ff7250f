# Experiment configuration package
