"""Tests for vsmlab."""
