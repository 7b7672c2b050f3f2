"""InPer: entropy-guided feature-statistics intervention for domain generalization
plus HomeoScore-filtered prototype adaptation at test time, on a numpy backend."""
from .datagen import DomainDataset, DomainSpec, default_domains, generate, leave_one_out, load_dataset, save_dataset
from .enin import EnInConfig, enin_transform, entropy_mask, masked_patch_stats, mix_stats, select_patch
from .hoper import HoPerConfig, MemoryBank, adapt_stream, causal_perturb, homeo_score, prototype_predict
from .nnet import ConvNet, TrainConfig, accuracy, forward, train
from .tensor import RngStream

__version__ = "0.1.0"
