from .volumes import MaskVolume, Report, Study, Volume, load_study, save_study
from .text import Lexicon, Vocabulary, default_vocabulary, detokenize, mention_spans, tokenize
from .phantom import (
    Cohort,
    EffectModel,
    LesionSpec,
    OrganSpec,
    PhantomConfig,
    default_phantom_config,
    generate_phantom,
    make_cohort,
)

__all__ = [
    "Volume", "MaskVolume", "Report", "Study", "save_study", "load_study",
    "Lexicon", "Vocabulary", "default_vocabulary", "tokenize", "detokenize", "mention_spans",
    "PhantomConfig", "OrganSpec", "LesionSpec", "EffectModel", "Cohort",
    "default_phantom_config", "generate_phantom", "make_cohort",
]
