"""longicause: counterfactual regression for longitudinal panels."""
