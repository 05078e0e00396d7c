"""Attack planning: position ranking, objectives and optimizers."""

from .objectives import (ObjectiveSpec, StraighteningTarget, build_objective, directional_loss, evaluate_objective,
                         make_straightening_target, scene_flip_loss, straightening_loss, untargeted_loss)
from .pgd import PgdParams, optimize_patch
from .ranking import Candidate, RankingParams, default_phi_max, pseudo_anchors, rank_positions, score_position
from .search import RoadsideRegion, SearchTrace, optimize_blackbox, pso_search, random_search

__all__ = ["Candidate", "ObjectiveSpec", "PgdParams", "RankingParams", "RoadsideRegion", "SearchTrace",
           "StraighteningTarget", "build_objective", "default_phi_max", "directional_loss", "evaluate_objective",
           "make_straightening_target", "optimize_blackbox", "optimize_patch", "pseudo_anchors", "pso_search",
           "random_search", "rank_positions", "scene_flip_loss", "score_position", "straightening_loss",
           "untargeted_loss"]
