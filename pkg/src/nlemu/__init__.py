"""Network-level emulation shellcode detection and evasion corpus toolkit."""

__version__ = "0.1.0"
