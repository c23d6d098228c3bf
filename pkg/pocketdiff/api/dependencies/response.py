import sys
from typing import Any, Dict, List, Optional, Union

import orjson
from rich.console import Console
from rich.table import Table


console = Console()


def success_response(
    message: str = "Command successful",
    data: Optional[Dict[str, Any]] = None,
) -> None:
    """
    Standardized success output for CLI commands.

    Args:
        message (str): Human-readable success message
        data (Optional): Summary values rendered as a two-column table
    """
    console.print(f"[bold green]{message}[/bold green]")
    if data:
        table = Table(show_header=False)
        for key, value in data.items():
            table.add_row(str(key), str(value))
        console.print(table)


def error_response(
    module: str,
    kind: str,
    message: str = "An error occurred",
    errors: Optional[Union[str, Dict[str, Any], List[Dict[str, Any]]]] = None,
) -> str:
    """
    Standardized error output: one machine-parsable line on stderr.

    Args:
        module (str): Module that raised the error
        kind (str): Error category within the module
        message (str): Error message
        errors (Optional): Error detail, appended as compact JSON

    Returns:
        str: The line written to stderr
    """
    line = f"ERROR:{module}:{kind}: {' '.join(message.split())}"
    if errors:
        line += " " + orjson.dumps(errors, default=str).decode()
    sys.stderr.write(line + "\n")
    sys.stderr.flush()
    return line
