"""Learning no-reference image quality from synthetic rankings.

Modules
-------
tensor_core   small CNN engine with hand-written backprop
ranking_loss  pairwise hinge loss and the all-pairs mini-batch gradient
distortion    graded blur / noise / JPEG-proxy distortions
corpus        ranked-image corpora on disk
dataset       mini-batches, crops, labeled manifests
metrics       LCC, SROCC, multi-crop evaluation, level histograms
trainer       ranking and fine-tuning loops, checkpoints
cli           command-line driver
"""

__version__ = "0.1.0"
