# newtframe/models/__init__.py
