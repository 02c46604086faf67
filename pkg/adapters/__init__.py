# Adapters package for dataset files
