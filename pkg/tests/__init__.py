# Test package for gcfdm
