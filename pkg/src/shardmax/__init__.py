"""shardmax: desk-scale instance-classification pretraining on a simulated
column-sharded softmax classifier, with feature-based weight warm starts and
hardest-class label smoothing.

Kept import-light on purpose: submodules (shardmax.trainer, shardmax.losses,
...) pull in numpy; the CLI configures threading before that happens.
"""

__version__ = "0.1.0"
