"""
SLGrad Lab Core Package
"""
