"""
Tests for the ACL lab engine
"""
