from pyfiglet import Figlet
from rich.console import Console
from rich.panel import Panel
from rich.text import Text

from . import __version__

BANNER_FONT = "slant"
BANNER_COLOR = "bold cyan"


def render_banner() -> str:
    return Figlet(font=BANNER_FONT).renderText("Heightfusion")


def show_banner(console: Console):
    """Static banner on the given (stderr) console; skipped when it is not a terminal."""
    if not console.is_terminal:
        return
    console.print(Text(render_banner(), style=BANNER_COLOR))
    console.print(
        Panel.fit(
            "[bold cyan]RGB + SAR height estimation\n"
            "[bold white]early / intermediate / late fusion\n"
            f"[bold magenta]Version: {__version__}",
            border_style="bright_magenta",
        )
    )
