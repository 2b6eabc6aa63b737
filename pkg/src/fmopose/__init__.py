"""Sub-frame appearance, 3D trajectory and spin of motion-blurred balls."""

__version__ = "0.1.0"
