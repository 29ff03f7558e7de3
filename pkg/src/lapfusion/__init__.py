"""Neural surface Laplacian fields for detailed, animatable reconstruction from point clouds."""
