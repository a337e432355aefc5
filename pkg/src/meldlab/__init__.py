"""meldlab: guided masked self-distillation for distributed-sensor event
analysis, on a self-contained float64 autodiff core.

The library is organized bottom-up:

- ``autodiff``    tensors, ops, AdamW, checkpoints
- ``gradcheck``   finite-difference gradient verification
- ``synthworld``  synthetic sensor worlds and dataset files
- ``infotheory``  exact mutual-information analysis of a world
- ``fusion``      projection, sensor-axis attention, coupling fusion
- ``classifier``  weak-label task head and losses
- ``selfdistill`` masking, EMA target, distillation loss, train loop
- ``methods``     the eight training recipes (A-H)
- ``metrics``     ranking metrics and the sensor-reduction sweep
- ``config``      experiment configuration documents
- ``harness``     deterministic end-to-end runs
- ``cli``         command-line front end
"""

from .autodiff import (AdamW, CheckpointError, NumericError, ParamStore, ShapeError,
                       Tensor, backward, load_checkpoint, no_grad, save_checkpoint)
from .config import ConfigError, config_hash, default_config, resolve_config, validate_config
from .gradcheck import check_gradients, numeric_gradient
from .infotheory import (DiscreteWorld, SensorGainReport, classify_roles,
                         discretize_world, mutual_information, sensor_gain)
from .methods import METHOD_IDS, ModelConfig, build_model, train_method
from .metrics import (average_precision, roauc, score_detection, score_tagging,
                      sensor_reduction_sweep)
from .selfdistill import (MaskError, MaskMatrix, ScheduleSpec, TrainLoopConfig,
                          TrainingError, distill_loss, lambda_at, removal_mask,
                          sample_mask, train_loop)
from .synthworld import (ClipSample, DatasetError, DatasetSplit, WorldSpec,
                         default_world_spec, generate_dataset, load_dataset,
                         save_dataset)

__version__ = "0.1.0"
