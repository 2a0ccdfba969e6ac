"""Test package for evsoar-sim."""
