# this is a package