from trajmoe.checkpoint import Checkpoint
from trajmoe.grpo import GrpoConfig, ScalarHead, ScorerHeads, finetune, finetune_scalar_head
from trajmoe.training import prepare_scenes
from trajmoe.world import generate_scenarios

from benchmarks.run import TRAIN_SEED, eval_scenes, train_variant, vocabulary


def test_toy_head():
    head = ScalarHead(0.0, 0.1)
    finetune_scalar_head(head, 0.7, GrpoConfig(group_size=16, iterations=200, seed=0))
    assert abs(head.mu - 0.7) <= 0.2 * 0.7


def test_finetuning_reduces_score_error():
    params = train_variant("moe", 0, 200, 2)
    held_out = eval_scenes(100)
    before = ScorerHeads(params, vocabulary(), held_out).mean_abs_error()
    scenes = prepare_scenes(generate_scenarios(TRAIN_SEED, 200), vocabulary())
    tuned = finetune(Checkpoint(params, "sup", seed=0), vocabulary(), scenes, GrpoConfig(seed=0))
    after = ScorerHeads(tuned.params, vocabulary(), held_out).mean_abs_error()
    assert after <= 0.8 * before
    assert tuned.params.equal(params, params.backbone_names())
