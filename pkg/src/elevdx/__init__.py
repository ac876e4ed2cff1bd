"""elevdx: lesion-elevation prediction and elevation-fused diagnosis training.

The toolkit trains image-level elevation classifiers, fuses ground-truth or
inferred elevation vectors into diagnosis classifiers as auxiliary inputs,
and quantifies the resulting improvement with paired statistics (McNemar's
mid-p test, Cohen's d) and bootstrap confidence intervals.
"""

from .dataio import (ClassWeights, DatasetManifest, ImageRecord, LabelSchema,
                     PreprocessConfig, SplitAssignment, compute_class_weights,
                     load_manifest, preprocess_image, stratified_split)
from .errors import ConfigError, DataError, ElevdxError
from .labeling import ElevationPrediction, attach_labels, infer_elevations, write_label_file
from .metrics import (MetricReport, StatTestResult, aggregate_runs, bootstrap_ci,
                      classification_metrics, cohens_d, macro_auroc, mcnemar_midp)
from .models import (BackboneSpec, FusionHead, ModelBundle, build_model,
                     forward_diagnosis, forward_elevation, gradcam, load_checkpoint,
                     save_checkpoint)
from .training import RunLog, TrainConfig, select_best, train, weighted_cross_entropy

__version__ = "0.1.0"
