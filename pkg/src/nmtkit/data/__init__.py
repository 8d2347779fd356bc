from .bpe import EOS_ID, PAD_ID, UNK_ID, SubwordVocab, learn_bpe
from .pipeline import Batch, InputPipeline, bucket_boundaries, input_pipeline
from .problems import Problem, generate_problem, get_problem

__all__ = [
    "EOS_ID", "PAD_ID", "UNK_ID", "SubwordVocab", "learn_bpe",
    "Batch", "InputPipeline", "bucket_boundaries", "input_pipeline",
    "Problem", "generate_problem", "get_problem",
]
