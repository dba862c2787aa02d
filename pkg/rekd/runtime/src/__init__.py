"""rekd.runtime"""
