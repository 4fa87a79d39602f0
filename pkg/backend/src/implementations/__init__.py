from .csv_episode_store import (
    CsvEpisodeStore,
    CsvTable,
    blob_digest,
    read_csv,
    write_csv,
)

__all__ = [
    "CsvEpisodeStore",
    "CsvTable",
    "blob_digest",
    "read_csv",
    "write_csv",
]
