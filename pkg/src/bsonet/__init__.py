"""bsonet: self-supervised image-quality optimization for portable
backscatter scanners.

Core pieces: synthetic phantom generation and a 16-bit image model
(``imagecore``), blind-spot training pairs (``n2v``), the resolution-adaptive
front/back network (``ranet``) and the windowed-transformer denoiser
(``bsformer``), quality metrics (``metrics``), classical filter baselines
(``baselines``), the training/evaluation loop (``trainer``), a TCP inference
service (``service``), and the command-line front end (``cli``).
"""

__version__ = "0.1.0"
