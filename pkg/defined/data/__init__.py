# Data layer package
