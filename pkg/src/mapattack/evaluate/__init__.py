"""Map AP, Hybrid A* planning and planning-impact metrics."""

from .metrics import (DEFAULT_THRESHOLDS, MetricReport, ade, average_precision, map_ap, trajectory_unsafe,
                      unreachable_goal_rate, unsafe_trajectory_rate)
from .planner import (OccupancyGrid, PlannerParams, PlanningProblem, Trajectory, Vehicle, bfs_reachable,
                      hybrid_astar, plan)

__all__ = ["DEFAULT_THRESHOLDS", "MetricReport", "OccupancyGrid", "PlannerParams", "PlanningProblem", "Trajectory",
           "Vehicle", "ade", "average_precision", "bfs_reachable", "hybrid_astar", "map_ap", "plan",
           "trajectory_unsafe", "unreachable_goal_rate", "unsafe_trajectory_rate"]
