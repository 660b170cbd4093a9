"""Backbone-specific `Denoiser` subclasses discovered by `loader.load_backbone`."""
