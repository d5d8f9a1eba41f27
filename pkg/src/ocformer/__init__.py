"""Transformer training as measure-valued optimal control."""
