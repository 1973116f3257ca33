# Testes do Atlas Lab
