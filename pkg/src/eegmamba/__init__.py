"""Multi-task signal classifier built on selective state-space scans.

Subpackages follow the processing pipeline: ``tensor``/``ops`` (autodiff
engine), ``scan``/``ssm`` (selective state-space core), ``blocks``
(bidirectional Mamba), ``stadaptive`` (channel/length-adaptive tokenizer),
``moe`` (task-aware mixture of experts), ``model`` (assembly + checkpoints),
``data`` (synthetic multi-task datasets), ``train`` (joint training loop),
``bench`` (scaling measurements), ``cli`` (entry point).
"""

__version__ = "0.1.0"
