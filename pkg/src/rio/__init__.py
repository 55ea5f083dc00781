"""rio: middleware-agnostic real-time robot I/O.

Building blocks for robot control loops: timestamped ring buffers and
request queues, swappable transport backends (in-process, shared memory,
TCP), template nodes with factory-produced server/client pairs, declarative
robot stations, teleoperation pipelines, episode recording, and asynchronous
policy deployment.
"""

__version__ = "0.1.0"
