"""
Test package for fusion_select.
"""
