# Low-level building blocks: autograd, image and dataset I/O, checkpoints
