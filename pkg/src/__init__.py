# Plasticity Lab Package
