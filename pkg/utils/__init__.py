# Utils package for parsing and formatting helpers
