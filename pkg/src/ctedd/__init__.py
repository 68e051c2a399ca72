"""Two-stage cooperative multi-agent learning on 2-D particle benchmarks.

Stage 1 trains global full-state policies (shared trunk, per-agent
deterministic and spread heads) with a centralized Q-network and
entropy-regulated exploration; stage 2 distills them into locally
executable message-passing policies from the recorded replay data.
"""

__version__ = "0.1.0"
