"""Data distribution in ad-hoc robot networks: AoI simulator, baselines and a PPO-trained GNN policy."""

from ._kernels import BACKEND
from .channel import RadioConfig, path_loss_db, channel_gain, power_for_range, resolve_receptions
from .scenario import MissionConfig, AgentState
from .knowledge import KnowledgeTable, TeamKnowledge, extract_graph, mean_aoi
from .protocol import run_episode, run_window
from .policies import RandomFlooding, RoundRobin, MinimumSpanningTree, Silent, parse_policy

__version__ = "0.1.0"
