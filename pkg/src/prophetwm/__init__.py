"""prophetwm: desk-scale joint video-action driving world model.

Subpackages:
    microworld     synthetic driving environment + kinematics oracle
    codec          frozen latent codec (conv autoencoder)
    action_module  lightweight latent-action model
    transition     diffusion transition model with state-context pathway
    trainer        joint training of action module + transition model
    rollout        autoregressive long-horizon prediction
    evalsuite      metrics and numerical verification
    cli            command-line entry point
"""

__version__ = "0.1.0"
