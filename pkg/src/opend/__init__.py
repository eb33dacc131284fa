"""OpenD: a desk-scale benchmark for language-instructed cabinet opening.

Subpackages map onto the pipeline: `scene` (procedural cabinets), `instruct`
(spatial referring expressions), `camera` (RGB+D sensing), `hands` (kinematic
hand models), `grasp` (closure search), `executor` (episode state machine),
`detect` (handle solvers and the plugin protocol), `bench` (dataset and
metrics), `server` (live sessions for agents and teleoperation).
"""

from . import bench, camera, detect, executor, grasp, hands, instruct, scene, server  # noqa: F401

__version__ = "0.1.0"
