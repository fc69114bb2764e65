"""privprune: privacy-oriented structured pruning for split edge/cloud
inference, with a model-inversion attack suite and evaluation harness."""

from .adversarial import (InversionModel, adversarial_loss, build_decoder,
                          build_surrogate_inverter, defender_adv_objective,
                          train_surrogate)
from .attacks import (AttackConfig, EdgeOracle, ReconstructionBatch,
                      run_blackbox_attack, run_whitebox_attack,
                      train_blackbox_inverter, whitebox_invert)
from .data import ArrayDataset, DatasetBundle, DatasetSpec, ingest_dataset, synthetic_images
from .defenses import (DefenseSpec, apply_dropout, apply_noise, apply_skip,
                       defended_predictions)
from .errors import (AttackError, ConfigurationError, IngestionError, NumericError,
                     ReportingError, SurgeryError, ValidationError)
from .lipschitz import (LipschitzConfig, LipschitzEstimate,
                        estimate_block_lipschitz, lipschitz_loss)
from .metrics import (AttackReport, attack_accuracy, mse_l2, psnr, reid_rank1, ssim)
from .models import (ArchSpec, PlainBlock, ResidualBlock, SplitModel, StructureRef,
                     arch_from_name, build_split_model, load_checkpoint, save_checkpoint)
from .pruning import (PruneConfig, SoftMaskSet, SparsityReport, fista_step,
                      mask_objective, prune_surgery, soft_threshold, sparsity)
from .trainer import (TrainConfig, TrainHistory, evaluate_accuracy, finalize,
                      train_baseline, train_defense)

__version__ = "0.1.0"
