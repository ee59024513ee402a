"""fedorch: a round-based federated averaging orchestrator.

Subsystems:
- tensors: weight containers, weighted aggregation, FTM1 wire encoding
- trainer: reference local learner (Adam + reduce-on-plateau)
- datakit: dataset splitting, CSV ingestion, synthetic multi-site generator
- metrics: confusion metrics, ROC-AUC, cross-site evaluation matrix
- protocol: framed messages, challenge-response auth, resume decisions
- coordinator: federation round state machine, checkpoints, control surface
- nodeagent: site-side training client
- simharness: deterministic in-process federation with fault injection
"""

__version__ = "0.1.0"
