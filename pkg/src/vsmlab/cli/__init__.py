"""Rich rendering for the vsmlab command line."""
