//! Sweep engine and CSV (placeholder).
