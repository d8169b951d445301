from .losses import (
    ForwardPass,
    LossTerms,
    ModelBundle,
    adv_loss_xy,
    adv_loss_yx,
    cycle_loss,
    discriminator_loss,
    forward,
    gan_value,
    generator_adv_loss,
    residual_norm,
    total_loss,
)
from .networks import DiscriminatorSpec, GeneratorSpec, PatchDiscriminator, ResnetGenerator
from .step import (
    OptimizerState,
    build_bundle,
    make_optimizers,
    train_step,
    translate_array,
    translate_to_mathematical,
    translate_to_realistic,
)
