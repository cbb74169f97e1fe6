"""fusc: unsupervised semantic clustering of imbalanced image corpora.

Pipeline stages: preprocess (burned-in text inpainting) -> self-supervised
pretraining -> embedding -> nearest-neighbor mining -> neighbor-consistency
clustering -> self-labeling -> evaluation -> cluster review service.
"""

__version__ = "0.1.0"

from fusc.data import (  # noqa: F401
    UNLABELED,
    VIEW_LABELS,
    DatasetManifest,
    ImageRecord,
    Split,
    load_manifest,
    map_to_superclass,
    save_manifest,
    split_by_patient,
)
