"""In-context (contextual) controller for a forced-circulation evaporator.

Modules: ``diffcore`` (reverse-mode autodiff), ``plant`` (evaporator
simulator), ``refmodel`` (reference model and reference signals),
``metasample`` (meta-dataset draws), ``ctxformer`` (decoder-only Transformer
plus PID controller), ``cltrain`` (closed-loop training curriculum),
``baselines`` (receding-horizon OC and grey-box identification) and
``evalharness`` (metrics and test protocol). ``ctxctl.cli`` is the
command-line entry point.
"""

__version__ = "0.1.0"
