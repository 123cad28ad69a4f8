"""
Application Host Module

This module hosts the command-line actions. An application registers one
ActionHolder per action; each action adds its own arguments, and run()
dispatches to it and maps backend errors to exit codes with a one-line
diagnostic.
"""

import argparse
import logging
import sys
from typing import Dict, List, Optional, Sequence, Tuple, Type

from .config_helper import ConfigHelper, RunConfig, split_overrides
from .errors import ClipNetError, UsageError

logger = logging.getLogger(__name__)

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class _ArgumentParser(argparse.ArgumentParser):
    def __init__(self, *args, **kwargs):
        kwargs.setdefault("allow_abbrev", False)
        super().__init__(*args, **kwargs)

    def error(self, message: str) -> None:
        raise UsageError(f"{self.prog}: {message}")


class ActionBase:
    """One subcommand; subclasses add arguments and implement on_run"""

    HELP = ""
    ACCEPTS_OVERRIDES = False

    def __init__(self, plugin_base: "PluginBase", action_id: str, action_name: str):
        self.plugin_base = plugin_base
        self.action_id = action_id
        self.action_name = action_name

    def add_arguments(self, parser: argparse.ArgumentParser) -> None:
        pass

    def on_run(self, args: argparse.Namespace, overrides: List[Tuple[str, str]]) -> int:
        raise NotImplementedError

    @staticmethod
    def get_config(args: argparse.Namespace, overrides: List[Tuple[str, str]]) -> RunConfig:
        """Run configuration from ``--config`` plus ``--section.key`` overrides"""
        return ConfigHelper(getattr(args, "config", None), overrides).get_config()


class ActionHolder:
    """Registration record binding an action class to its command name"""

    def __init__(self, plugin_base: "PluginBase", action_base: Type[ActionBase], action_id: str,
                 action_name: str):
        self.plugin_base = plugin_base
        self.action_base = action_base
        self.action_id = action_id
        self.action_name = action_name

    @property
    def command(self) -> str:
        return self.action_id.split("::")[-1]

    def create(self) -> ActionBase:
        return self.action_base(self.plugin_base, self.action_id, self.action_name)


class PluginBase:
    """Command-line application made of registered actions"""

    def __init__(self):
        self.action_holders: Dict[str, ActionHolder] = {}
        self.plugin_name = ""
        self.plugin_version = ""

    def add_action_holder(self, holder: ActionHolder) -> None:
        if holder.command in self.action_holders:
            raise ValueError(f"action '{holder.command}' registered twice")
        self.action_holders[holder.command] = holder

    def register(self, plugin_name: str, plugin_version: str) -> None:
        self.plugin_name = plugin_name
        self.plugin_version = plugin_version

    def build_parser(self) -> Tuple[argparse.ArgumentParser, Dict[str, ActionBase]]:
        parser = _ArgumentParser(prog=self.plugin_name)
        parser.add_argument("--log-level", default="INFO",
                            choices=["DEBUG", "INFO", "WARNING", "ERROR"], help="Logging verbosity")
        parser.add_argument("--version", action="version", version=f"{self.plugin_name} {self.plugin_version}")
        sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_ArgumentParser)
        actions = {}
        for command, holder in self.action_holders.items():
            action = holder.create()
            action.add_arguments(sub.add_parser(command, help=action.HELP or holder.action_name))
            actions[command] = action
        return parser, actions

    def run(self, argv: Optional[Sequence[str]] = None) -> int:
        """
        Parse arguments and run one action

        Args:
            argv: Arguments without the program name (sys.argv[1:] when None)

        Returns:
            Process exit code: 0 success, 1 usage/config, 2 data contract, 3 numeric failure
        """
        argv = list(sys.argv[1:] if argv is None else argv)
        try:
            parser, actions = self.build_parser()
            args, rest = parser.parse_known_args(argv)
            configure_logging(args.log_level)
            if not args.command:
                raise UsageError(f"a command is required: {', '.join(self.action_holders)}")
            action = actions[args.command]
            if rest and not action.ACCEPTS_OVERRIDES:
                raise UsageError(f"{args.command}: unrecognized arguments: {' '.join(rest)}")
            return action.on_run(args, split_overrides(rest)) or 0
        except ClipNetError as e:
            print(f"error: {e}", file=sys.stderr)
            return e.exit_code
        except KeyboardInterrupt:
            print("error: interrupted", file=sys.stderr)
            return 130
        except Exception as e:
            logger.error(f"✗ Unexpected failure: {e}", exc_info=True)
            print(f"error: {e}", file=sys.stderr)
            return 1


def configure_logging(level: str = "INFO") -> None:
    """Configure the root logger once, on stderr"""
    logging.basicConfig(level=getattr(logging, level.upper(), logging.INFO), format=LOG_FORMAT,
                        stream=sys.stderr, force=True)
