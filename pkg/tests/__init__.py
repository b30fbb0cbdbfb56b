"""Test suite for feed-baby application."""
