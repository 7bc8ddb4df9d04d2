from ..errors import ConfigError
from .core import Environment, GameOutcome, GameState, Result
from .rsa import FIRST_DECLARE, LITERAL_UPDATE, PRAGMATIC_UPDATE, RSAEnv, RSAPayload
from .taboo import TabooEnv, TabooPayload, TabooWorld, read_worlds, taboo_generate_world, write_worlds


def make_env(game: str, **kwargs) -> Environment:
    if game == "rsa":
        return RSAEnv(**kwargs)
    if game == "taboo":
        return TabooEnv(**kwargs)
    raise ConfigError(f"unknown game {game!r}")


__all__ = [
    "Environment",
    "GameOutcome",
    "GameState",
    "Result",
    "RSAEnv",
    "RSAPayload",
    "TabooEnv",
    "TabooPayload",
    "TabooWorld",
    "FIRST_DECLARE",
    "LITERAL_UPDATE",
    "PRAGMATIC_UPDATE",
    "make_env",
    "read_worlds",
    "taboo_generate_world",
    "write_worlds",
]
