"""Multi-organ head CT segmentation with synthesized MR.

Subpackages:

* ``voxelio``   volume / RT-structure ingest, instance annotations, dataset statistics
* ``phantoms``  synthetic paired CT/MR cases with exact ground truth
* ``losses``    adversarial, content-consistency, task and segmentation objectives
* ``networks``  UNet generator, patch discriminator, segmentation UNet, instance segmentor
* ``training``  preprocessing, augmentation and the two training loops
* ``evaluation`` dice reports and synthesis exports
"""

__version__ = "0.1.0"
