# newtframe/services/__init__.py
