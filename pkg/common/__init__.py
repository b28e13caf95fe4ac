"""Helpers shared by the tool surface: ToolError and the MCP registration decorator."""
