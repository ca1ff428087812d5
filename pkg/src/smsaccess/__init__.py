"""Accessibility of shared-mobility feeder services from observed trips.

Observed feeder trips are turned into kriged wait/travel-time fields, then
into virtual GTFS trips merged with the regular schedule; accessibility is
scored on the resulting time-expanded graph.
"""

from .accessibility import accessibility_score, earliest_arrival, improvement, score_period
from .geostat import experimental_semivariance, fit_variogram, krige, krige_field
from .ingest import feeder_area, group_by_timeslot, load_observations
from .synth import build_virtual_trips, emit_gtfs, generate_departures
from .tessellation import assign_opportunities, locate, tessellate
from .transit_graph import build_graph, parse_gtfs

__version__ = "0.1.0"

__all__ = [
    "accessibility_score", "assign_opportunities", "build_graph", "build_virtual_trips", "earliest_arrival",
    "emit_gtfs", "experimental_semivariance", "feeder_area", "fit_variogram", "generate_departures",
    "group_by_timeslot", "improvement", "krige", "krige_field", "load_observations", "locate", "parse_gtfs",
    "score_period", "tessellate",
]
