"""Volume-informed representation learning for machine part geometry.

Library layout, roughly bottom-up:

- ``geometry``: analytic CSG parts, SDF grids, sampling, mass properties,
  shadow/setup analysis, part and grid file formats
- ``augmentation``: the 48-element axis-aligned symmetry group acting on
  normalized grid coordinates and bbox extents
- ``nncore``: minimal float64 tensors with reverse-mode autodiff, layers,
  losses, Adam, cosine schedule
- ``encoder``: boundary-graph extraction and the 3-tier graph encoder
- ``pretrain``: self-supervised bbox + SDF-reconstruction training,
  checkpoints, grid reconstruction
- ``downstream``: few-shot adaptation (probes, LoRA, finetuning),
  normalization, the evaluation protocol and reports
- ``heuristics``: closed-form manufacturing-time models and TDI functions
- ``synth``: the seeded synthetic part generator and its proxy labels
- ``cli``: command-line pipeline over the above
"""

__version__ = "0.1.0"
