"""
synthdet package to generate, filter and train on synthetic object detection data
"""
__version__ = "0.1"
