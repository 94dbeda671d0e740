"""Voxel radiance fields and field-supervised dense correspondence.

A desk-scale pipeline: fit a voxel radiance field to posed RGB images
(optionally with sparse depth supervision), generate dense correspondence
tuples from the field by expected-depth reprojection or by sampling the
termination-depth distribution, train a small dense-descriptor model on the
tuples, and score matchers with AEPE/PCK against analytic ground truth.
"""

from .correspondence import (CorrespondenceTuple, GenConfig, GenerationReport,
                             METHOD_DENSITY_FIELD, METHOD_DEPTH_MAP, Rejected,
                             cycle_check, gen_density_field, gen_depth_map,
                             generate_dataset, read_tuples_csv, write_tuples_csv)
from .dataio import (ManifestError, PosedImage, SparseDepthPoint, holdout_split,
                     load_manifest, write_dataset)
from .descriptor import (DescriptorModel, DescTrainConfig, contrastive_loss,
                         forward, load_model, match, save_model, train_descriptors,
                         visualize)
from .evalsynth import (AnnotatedCorrespondence, EvalResult, SyntheticScene,
                        aepe, analytic_ground_truth, annotate, bake,
                        evaluate_matcher, make_scene, pck, psnr)
from .field import (COLOR_RGB, COLOR_SH1, FieldQuery, RadianceField, load_field,
                    sample, sample_gradient, save_field)
from .geometry import (CameraIntrinsics, InvalidPixelError, Pixel, Pose, Ray,
                       generate_ray, look_at_pose, project, reproject, unproject)
from .optimizer import (TrainConfig, TrainResult, depth_loss, photometric_loss,
                        train, train_from)
from .renderer import (DepthDistribution, EmptyRayError, RaySamples,
                       composite_color, composite_depth, composite_gradients,
                       depth_distribution, march, render_image)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
