"""Block-wise logit distillation at desk scale, on a from-scratch autodiff engine."""

from .core import (DistillBundle, DistillPlan, LossBreakdown, SteppingStone,
                   build_stones, cross_loss, ensemble_logits, prune_stones,
                   stone_logits, total_loss, warmup_factor)
from .data import (CheckpointMeta, Dataset, gen_synthetic, load_checkpoint,
                   load_checkpoint_meta, load_idx_like, read_checkpoint,
                   save_checkpoint, write_idx)
from .losses import (LogitDistance, kd_gradient_wrt_student_logits, kl_kd,
                     kl_logit_distance, task_loss)
from .nn import (ArchSpec, Block, CompositeNet, Connector, PRESETS,
                 build_factory_pair, build_net, net_from_descriptor)
from .tensor import Tensor, no_grad
from .theory import (ApproxReport, LinearTail, SmoothTail, StoneTail,
                     TaylorReport, alignment_pull_demo,
                     check_high_temp_gradient, check_taylor_feature_gradient,
                     finite_diff_jacobian)
from .trainer import (SGD, OptimizerState, Schedule, TrainReport,
                      TrainSettings, evaluate, lr_at, sgd_step, train_run,
                      train_teacher)

__version__ = "0.1.0"
