from .sparsity import NmPattern, NmMask
