//! Scenario-file parsing (placeholder).
