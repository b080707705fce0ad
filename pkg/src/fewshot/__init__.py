"""Few-shot meta-learning engine: numpy autodiff, episodic methods, YOLOMAML on toy scenes."""

__version__ = "0.1.0"
