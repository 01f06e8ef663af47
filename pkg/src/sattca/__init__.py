"""Scale-aware test-time click adaptation for 3D lesion segmentation.

Subpackages: volgrid (volumes, preprocessing, input pyramid), clickgeom
(click-mask geometry), segnet (multi-scale encoder-decoder and parameter
registry), objective (losses), adapt (instance-level adaptation), evalmetrics
(DSC/NSD/recall and stratified reports), phantom (synthetic long-tail
dataset), harness (training and experiments), cli (command line).
"""

__version__ = "0.1.0"
