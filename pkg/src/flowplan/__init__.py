"""Contingency planning with learned autoregressive trajectory flows.

A robot that must merge, turn, or overtake in front of a human driver cannot
commit to a single open-loop trajectory: the right move depends on what the
human does next.  This package models the joint robot/human future with a
conditional autoregressive normalizing flow and plans in the flow's latent
space, where fixing the robot's noise variables yields a closed-loop
contingent policy rather than a fixed path.

Modules
-------
core      shared geometry, randomness, and dataset/checkpoint IO
diffkit   reverse-mode autodiff on arrays, MLPs, Adam, gradient checking
flow      the conditional autoregressive flow model and its training loop
planner   latent-space contingent planning and its ablations
simworld  two-agent driving scenarios, expert demonstrators, evaluation
discrete  finite-alphabet flows for exact representability analysis
valuelab  finite games for comparing planner value estimates
cli       command-line entry points for the full pipeline
"""

__version__ = "0.1.0"
