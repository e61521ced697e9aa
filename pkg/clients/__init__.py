"""Federated eye-state simulator clients"""
