from .checkpoint import LoadedCheckpoint, load_checkpoint, save_checkpoint, state_hash
from .contracts import AttentionTap, DenoiserRun
from .pretrain import toy_pretrain
from .scheduler import DDPMScheduler
from .toy import ToyBackend, ToyConfig, ToyTokenizer, register_placeholders
from .world import ToyWorld
