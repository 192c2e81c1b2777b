"""Convolutional recurrent (frequency-patch LSTM) acoustic models.

Subpackages: features (mel log-filterbank front end), layers (forward and
backward passes for every layer family), network (architecture strings,
building, parameter counting), training (truncated-BPTT protocol, gradient
checking), synth (synthetic corpus generator), cli (command line).
"""

__version__ = "0.1.0"
