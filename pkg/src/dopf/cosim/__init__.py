"""Deterministic co-simulation of the feeder, sensing, estimation and control loop."""

from .broker import broker_run, build_federates
from .estimation import Channel, InjectionFilter, WLSStateEstimator, channels_for, wls_solve
from .federates import (
    DOPFFederate,
    EstimatorFederate,
    Federate,
    FeederFederate,
    Inbox,
    RecorderFederate,
    SensorFederate,
)
from .messages import KINDS, Message, Payload
from .recording import Recording
from .scenario import ComponentDefinition, Scenario, load_scenario, parse_scenario, validate_scenario

__all__ = [
    "KINDS", "Channel", "ComponentDefinition", "DOPFFederate", "EstimatorFederate", "Federate", "FeederFederate",
    "Inbox", "InjectionFilter", "Message", "Payload", "RecorderFederate", "Recording", "Scenario",
    "SensorFederate", "WLSStateEstimator", "broker_run", "build_federates", "channels_for", "load_scenario",
    "parse_scenario", "validate_scenario", "wls_solve",
]
