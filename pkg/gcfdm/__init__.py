# Graph-convolution finite differences for block-structured grids
__version__ = "1.0.0"
