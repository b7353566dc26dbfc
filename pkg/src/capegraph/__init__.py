"""Category-agnostic keypoint localization with a graph transformer decoder.

Pure numpy: a small reverse-mode autodiff tape, a strided CNN backbone, a
joint support/query transformer encoder, similarity-peak proposals and a
decoder whose feed-forward blocks mix keypoints along the object skeleton.
"""
__version__ = "0.1.0"
