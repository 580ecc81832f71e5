# newtframe/utils/__init__.py
