"""Hierarchical planning/tracking MPC stack for quadrotor flight.

Layers: offline terminal-set design (SDP), a slow long-horizon planner and a
fast tracker sharing one nonlinear model, convex free-space decomposition on an
occupancy grid, and a deterministic logical-time closed-loop simulator.
"""

__version__ = "0.1.0"
