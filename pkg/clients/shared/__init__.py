"""Shared utilities for the simulator clients"""
