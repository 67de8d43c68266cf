"""Bundled case and profile files."""

from importlib.resources import files


def bundled_case_path(name: str) -> str:
    return str(files(__package__).joinpath(name))
