"""revledger: a tamper-evident, replicated revision ledger.

Authors commit revisions of their works through a CLI; a set of
simulated nodes reaches Byzantine fault tolerant agreement on an
append-only hash chain of revision records, and any later modification
of history is detectable by audit.
"""

__version__ = "0.1.0"
