from .losses import (Labels, LossReport, adv_loss_frame, adv_loss_id, adv_loss_sync, box_smooth,
                     central_gradients, frame_similarity_loss, gradient_loss, total_losses)
from .networks import (Composer, ComposerConfig, FrameDiscriminator, FrameGenerator, GeneratorInput,
                       IdentityDiscriminator, IdentityInflater, InflatedIdentity, SyncDiscriminator,
                       generate_frame)
from .train import (ClipTensors, Stage2Config, load_composer, make_optimizers, prepare_clips, sample_pair,
                    save_composer, stage2_step, sync_accuracy, train_stage2, train_sync_discriminator)
