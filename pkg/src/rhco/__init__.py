"""Relation-aware heterogeneous graph network with cross-view contrastive learning."""
