"""MetaDD: cross-architecture CAM consensus for dataset distillation."""
__version__ = "0.1.0"

from .cam import (AttentionCapture, CamStack, ConvCapture, RawCam, attention_cam, cam_stack,  # noqa: E402
                  capture_attention, capture_conv, conv_cam, pos_score, resize_normalize)
from .distill import (DistillConfig, SyntheticDataset, dc_loss, distill_run, dm_loss,  # noqa: E402
                      init_synthetic, metadd_step)
from .evaluate import (EvalArch, EvalReport, cam_variance_metric, cross_arch_report, delta_acc,  # noqa: E402
                       erasure_study, train_on_distilled)
from .losses import LossBreakdown, LossWeights, ai_loss, cam_variance, kd_loss, pos_loss, total_loss  # noqa: E402
from .masks import erase, hetero_mask, meta_mask, threshold_mask  # noqa: E402
from .models import (ArchitectureSpec, AuxiliaryPool, PretrainedModel, Schedule, build_model,  # noqa: E402
                     freeze, load_checkpoint, pretrain, save_checkpoint)
