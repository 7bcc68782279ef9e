"""Desk-scale joint CTC/attention sequence transduction.

Subpackages: adcore (autodiff), ctc (alignment loss), prefix (incremental
CTC prefix scoring), model (hierarchical encoder-decoder), beam (joint
decoding), synth (synthetic task generator), metrics (BLEU/ROUGE-L/WER),
train (optimization and checkpoints), cli (experiment runner).
"""

__version__ = "0.1.0"
