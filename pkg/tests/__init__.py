"""Tests for the slicecollab package."""
