"""Desk-scale laboratory for emergent adversarial communication in
multi-agent reinforcement learning.

Subpackages/modules:
    diffcore     -- minimal reverse-mode autodiff engine + optimizers
    graphnet     -- aggregation GNN communication channel
    gridworld    -- the three grid environments
    policy       -- actor / centralized-critic networks
    trainer      -- rollouts, GAE, the two PPO policy gradients
    interpreter  -- white-box message decoder and mAP scoring
    harness      -- CLI, experiment orchestration, reporting
"""

__version__ = "0.1.0"
