"""System-aware mixture-of-experts trajectory world model."""
