from .gradcheck import grad_check
from .losses import (
    IGNORE,
    NEGATIVE,
    POSITIVE,
    build_target_matrix,
    infonce_loss,
    multi_encoder_loss,
    softmax_cross_entropy,
    triplet_count,
    triplet_loss,
)
from .network import (
    EncoderParams,
    MultiEncoderParams,
    embed_features,
    encode,
    init_params,
    pool_mel,
)
from .training import (
    TrainConfig,
    TrainResult,
    classification_pretext_loss,
    load_checkpoint,
    save_checkpoint,
    train,
)
