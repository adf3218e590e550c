from .loader import ImageSet, binary_set
from .manifest import (BINARY, LABELS, SPLITS, DatasetManifest, ManifestRow, check_disjoint, load_manifest,
                       subsample_fraction, write_manifest)
from .pgm import read_pgm, write_pgm
from .synthetic import (DESK3, PRESET_GROUPS, Lesion, SyntheticDomainSpec, Texture, generate_preset,
                        generate_synthetic_domain, render_image)
from .transforms import (IMAGENET_MEAN, IMAGENET_STD, AugmentationPipeline, augment, normalize,
                         resize_bilinear)
