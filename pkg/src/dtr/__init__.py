"""Stylized knowledge-grounded dialogue by disentangle-then-rewrite.

The pipeline generates a grounded draft response, scores each draft token
for style content, blanks the most stylistic spans into a template, and
rewrites the template in a target style.
"""

__version__ = "0.1.0"
