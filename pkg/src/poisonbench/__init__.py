"""poisonbench: a benchmark engine for targeted data-poisoning and backdoor attacks."""

__version__ = "0.1.0"
