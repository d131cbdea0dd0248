"""trajmoe modules."""
from trajmoe.model import MoEScorerParams, ScorerConfig, score_vocabulary, select_trajectory
from trajmoe.vocab import Trajectory, TrajectoryVocabulary, build_vocabulary, nearest_anchor
from trajmoe.world import Scenario, generate_scenario, oracle_scores
