//! Holds the release acceptance suite under `tests/`.
