import torch

torch.set_num_threads(1)  # keep every numeric path bit-reproducible
