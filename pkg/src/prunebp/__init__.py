"""Check-node pruning and quantization for neural BP decoders.

Builds overcomplete parity-check representations of short block codes,
trains weighted (neural) belief-propagation and offset-min-sum decoders
over the unrolled Tanner graph, prunes unimportant check nodes into
per-iteration parity-check matrices, jointly trains message and weight
quantizers, and evaluates BLER/BER against brute-force ML decoding.
"""

from . import codes, model_io, msgpass, pruning, quant, simulation, training
from .codes import LinearCode, ParityCheckMatrix, ldpc_128_64, rm_code
from .msgpass import Decoder, DecodeTrace, IterationPlan, WeightSet, decode
from .quant import QuantizationPlan, QuantizerSpec
from .simulation import ChannelConfig, ErrorRateEstimate, ml_decode, monte_carlo
from .training import TrainConfig, train_until_plateau

__version__ = "0.1.0"
