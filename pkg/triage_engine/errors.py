#!/usr/bin/env python
# -*- coding:utf-8 -*-


class EmptyInputError(ValueError):
    """Raised when a binary has no bytes to segment."""


class ZeroNormError(ValueError):
    """Raised when a cosine is requested against a zero vector."""


class GraphStateError(RuntimeError):
    """Raised on a graph used in the wrong normalization state."""
