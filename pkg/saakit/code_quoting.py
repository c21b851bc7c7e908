import math
from collections.abc import Iterable
from pathlib import Path


def format_lines(
    content: str, line_nums: Iterable[int], rel_path: Path | None = None
) -> str:
    content_lines = content.splitlines()
    wanted = sorted({n for n in line_nums if 1 <= n <= len(content_lines)})
    if not wanted:
        return ""
    lines_chars = math.floor(math.log10(wanted[-1])) + 1
    content_w_lines = "\n".join(
        f"{n:>{lines_chars}} | {content_lines[n - 1]}" for n in wanted
    )

    file_name = str(rel_path) if rel_path else "<file>"
    return f"""================
{file_name}
================

{content_w_lines}
"""
