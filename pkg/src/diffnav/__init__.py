"""Goal-conditioned trajectory diffusion for multi-robot navigation.

Library layout:

- ``sim``        planar double-integrator arena, scenarios, rasterized frames
- ``expert``     potential-field demonstrator and dataset collection
- ``windows``    on-disk dataset format and training window sampler
- ``axial``      trajectory embedding (axial attention / linear baseline)
- ``context``    scene context encoder, time embedding, FiLM conditioning
- ``unet``       1-D temporal U-Net noise predictor
- ``diffusion``  noise schedule, losses, training loop, constrained sampler
- ``executor``   receding-horizon execution, evaluation, upscaling sweeps
- ``ablate``     encoder/horizon ablation grid
- ``report``     delimited summary tables and matplotlib figures
- ``cli``        ``diffnav`` command line entry point
"""

__version__ = "0.1.0"
