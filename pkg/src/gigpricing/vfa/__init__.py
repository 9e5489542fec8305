"""Post-decision value function approximation."""
from .network import (
    StateFeatures,
    ValueNetwork,
    feature_dim,
    featurize,
    load_checkpoint,
    removal_globals,
    save_checkpoint,
)
from .training import (
    EstimatedUtilities,
    TrainConfig,
    TrainLog,
    Transition,
    batch_targets,
    bellman_target,
    exploration_std,
    mean_episode_reward,
    price_state,
    train,
)
