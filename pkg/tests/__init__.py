"""Test package for gossipwatch."""
