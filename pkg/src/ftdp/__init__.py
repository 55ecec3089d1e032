"""Fault-tolerant data-parallel training over TCP: replica groups survive
process loss mid-step by regrouping through a quorum service and retrying
the collective, while lagging replicas rejoin with zero contributions and
catch up in the background."""

__version__ = "0.1.0"
