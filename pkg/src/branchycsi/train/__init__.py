from .augment import AugmentConfig, augment
from .loop import EpochRecord, TrainConfig, TrainingDiverged, TrainResult, evaluate, predict, train
from .loss import LossReport, joint_loss
from .metrics import MetricsReport, confusion_matrix
from .optim import AdamState, AdamW, cosine_lr, optimizer_step
