"""Map NIDS flow logs to MITRE ATT&CK tactic-technique pairs with staged LLM reasoning."""

__version__ = "0.1.0"
