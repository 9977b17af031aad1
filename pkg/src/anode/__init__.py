"""Neural-ODE gradient engine: adjoint pipelines, checkpointing and reversibility diagnostics."""
