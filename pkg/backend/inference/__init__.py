# Inference package
