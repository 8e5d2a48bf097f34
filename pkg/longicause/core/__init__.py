"""Cross-cutting helpers: errors, logging, randomness, early stopping."""
