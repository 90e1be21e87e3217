"""Change-point detection on the trend-filtering dual path with post-detection inference."""
