from .aggregate import aggregate_accepted, mean_bn_stats
from .clip import clip_vector, norm_clip
from .deepsight import defend_deepsight
from .flame import cosine_distances, defend_flame, flame_sigma
from .foolsgold import FoolsgoldHistory, defend_foolsgold, foolsgold_weights
from .indicator import (
    DEFAULT_EPSILON,
    MANY_CLASS_EPSILON,
    IndicatorState,
    indicator_alphas,
    indicator_inject,
    indicator_inspect,
)
from .multikrum import defend_multikrum, krum_scores
from .rflbat import defend_rflbat
from ..updates import ClientUpdate, DefenseVerdict

DEFENSES = ("none", "indicator", "multikrum", "deepsight", "foolsgold", "rflbat", "flame", "norm_clip")
