"""
Test suite for the transactional command sandbox.
"""
